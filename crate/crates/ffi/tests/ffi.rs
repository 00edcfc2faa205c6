use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use heartnet::baselines::{LearnerSpec, Pipeline};
use heartnet::features::impute_median;
use heartnet::neuralnet::{build_network, AdaGrad, Checkpoint, TrainParams};
use heartnet::pipeline::{cnn_predict, preprocess, BaselineModel, CnnModel};
use heartnet::segmental::VoteRule;
use heartnet::segmenter::Segmenter;
use heartnet::signal_io::Label;
use heartnet::synthgen::{generate_dataset, DatasetRanges, SynthRecording};
use heartnet_ffi::*;

fn dataset(n: usize, seed: u64) -> Vec<SynthRecording> {
    generate_dataset(n, 0.5, &DatasetRanges::default(), seed).unwrap()
}

fn segmenter() -> *mut HnSegmenter {
    let mut seg = ptr::null_mut();
    assert_eq!(unsafe { hn_segmenter_new(&mut seg) }, HnStatus::Ok);
    assert!(!seg.is_null());
    seg
}

fn last_error() -> Option<String> {
    let p = hn_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_and_error_reporting() {
    let version = unsafe { CStr::from_ptr(hn_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));

    assert_eq!(unsafe { hn_segmenter_new(ptr::null_mut()) }, HnStatus::NullPointer);
    assert!(last_error().unwrap().contains("out"));
    let seg = segmenter();
    assert_eq!(last_error(), None);

    let mut score = 0.0;
    let mut label = 0;
    let x = [0.0; 10];
    let status = unsafe { hn_cnn_classify(ptr::null(), seg, x.as_ptr(), x.len(), 1000, &mut score, &mut label) };
    assert_eq!(status, HnStatus::NullPointer);
    unsafe { hn_segmenter_free(seg) };
    unsafe { hn_segmenter_free(ptr::null_mut()) };
}

#[test]
fn denoise_matches_library() {
    let rec = &dataset(1, 1)[0].recording;
    let mut out = vec![0.0; rec.samples.len()];
    let mut snr = 0.0;
    let status = unsafe { hn_denoise(rec.samples.as_ptr(), rec.samples.len(), out.as_mut_ptr(), &mut snr) };
    assert_eq!(status, HnStatus::Ok);
    let expected = heartnet::denoise::denoise(&rec.samples).unwrap();
    assert_eq!(out, expected.signal);
    assert_eq!(snr, expected.snr_db);

    let short = [1.0; 4];
    assert_eq!(
        unsafe { hn_denoise(short.as_ptr(), short.len(), out.as_mut_ptr(), &mut snr) },
        HnStatus::TooShort
    );
}

#[test]
fn segment_reports_required_capacity() {
    let seg = segmenter();
    let rec = &dataset(1, 2)[0].recording;
    let mut count = 0;
    let status = unsafe {
        hn_segment(seg, rec.samples.as_ptr(), rec.samples.len(), rec.sample_rate, ptr::null_mut(), 0, &mut count)
    };
    assert_eq!(status, HnStatus::BufferTooSmall);
    let expected = preprocess(rec, &Segmenter::pretrained().unwrap()).unwrap().cycles;
    assert_eq!(count, expected.len());
    assert!(count > 0);

    let mut cycles = vec![HnCycle::default(); count];
    let status = unsafe {
        hn_segment(seg, rec.samples.as_ptr(), rec.samples.len(), rec.sample_rate, cycles.as_mut_ptr(), count, &mut count)
    };
    assert_eq!(status, HnStatus::Ok);
    for (c, e) in cycles.iter().zip(&expected) {
        assert_eq!((c.s1_start, c.sys_start, c.s2_start, c.dia_start, c.cycle_end), (e.s1_start, e.sys_start, e.s2_start, e.dia_start, e.cycle_end));
    }
    unsafe { hn_segmenter_free(seg) };
}

#[test]
fn cnn_handle_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let network = build_network("FCNN-Reduced", 1200, 0.5, 3).unwrap();
    let model = CnnModel {
        checkpoint: Checkpoint {
            optimizer: AdaGrad::new(&network, 0.01, 1e-4),
            network,
            params: TrainParams::default(),
            seed: 3,
            epoch: 0,
            val_accuracy: 0.0,
        },
        log: Vec::new(),
        rule: VoteRule::new(0.3).unwrap(),
        retention: 1.0,
    };
    model.save(dir.path()).unwrap();

    let mut cnn = ptr::null_mut();
    assert_eq!(unsafe { hn_cnn_load(c_path(dir.path()).as_ptr(), &mut cnn) }, HnStatus::Ok);
    let seg = segmenter();
    let rec = &dataset(1, 4)[0].recording;
    let (mut score, mut label) = (0.0, 0);
    let status = unsafe {
        hn_cnn_classify(cnn, seg, rec.samples.as_ptr(), rec.samples.len(), rec.sample_rate, &mut score, &mut label)
    };
    assert_eq!(status, HnStatus::Ok);
    let processed = preprocess(rec, &Segmenter::pretrained().unwrap()).unwrap();
    let (fraction, voted) = cnn_predict(&model.checkpoint, model.rule, &processed).unwrap().unwrap();
    assert_eq!((score, label), (fraction, voted.code()));

    let noise: Vec<f64> = (0..300).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
    let status = unsafe { hn_cnn_classify(cnn, seg, noise.as_ptr(), noise.len(), 1000, &mut score, &mut label) };
    assert_eq!(status, HnStatus::Unsegmentable);

    unsafe {
        hn_cnn_free(cnn);
        hn_segmenter_free(seg);
    }
}

#[test]
fn corrupt_and_missing_models_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("checkpoint.json"), "{\"network\": []}").unwrap();
    std::fs::write(dir.path().join("vote_rule.json"), "{\"threshold\": 0.5}").unwrap();
    let mut cnn = ptr::null_mut();
    assert_eq!(unsafe { hn_cnn_load(c_path(dir.path()).as_ptr(), &mut cnn) }, HnStatus::Checkpoint);
    assert!(cnn.is_null());
    assert!(last_error().is_some());

    let mut model = ptr::null_mut();
    let missing = c_path(&dir.path().join("missing.json"));
    assert_eq!(unsafe { hn_baseline_load(missing.as_ptr(), &mut model) }, HnStatus::Io);
    assert_eq!(unsafe { hn_baseline_load(ptr::null(), &mut model) }, HnStatus::NullPointer);
}

#[test]
fn baseline_handle_matches_library() {
    let seg_lib = Segmenter::pretrained().unwrap();
    let data = dataset(20, 5);
    let processed: Vec<_> = data.iter().map(|r| preprocess(&r.recording.clone().with_label(r.label), &seg_lib).unwrap()).collect();
    let rows: Vec<_> = processed.iter().map(|p| p.features().unwrap()).collect();
    let (x, medians) = impute_median(&rows).unwrap();
    let y: Vec<Label> = data.iter().map(|r| r.label).collect();
    let spec = LearnerSpec::Logistic { l1: 0.0, l2: 1e-2 };
    let model = BaselineModel {
        pipeline: Pipeline::fit(&spec, &x, &y, None, None, 0).unwrap(),
        medians,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { hn_baseline_load(c_path(&path).as_ptr(), &mut handle) }, HnStatus::Ok);
    let seg = segmenter();
    for (r, p) in data.iter().zip(&processed).take(4) {
        let rec = &r.recording;
        let (mut score, mut label) = (0.0, 0);
        let status = unsafe {
            hn_baseline_classify(handle, seg, rec.samples.as_ptr(), rec.samples.len(), rec.sample_rate, &mut score, &mut label)
        };
        assert_eq!(status, HnStatus::Ok);
        let (s, l) = model.predict(&p.features().unwrap());
        assert_eq!((score, label), (s, l.code()));
    }
    unsafe {
        hn_baseline_free(handle);
        hn_segmenter_free(seg);
    }
}

/// Compiles a C program against the generated header and links it with
/// the static library.
#[test]
fn c_program_links_against_header() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libheartnet_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("heartnet_smoke");
    let status = std::process::Command::new("cc")
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let run = std::process::Command::new(&out).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
