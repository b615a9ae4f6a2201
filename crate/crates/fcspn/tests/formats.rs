//! Binary containers, run configuration and report writers.

use std::path::Path;

use fcspn::config::{parse_strategy, ConfigError, RunConfig, KEYS};
use fcspn::formats::{
    decode_checkpoint, decode_cube, decode_labels, decode_split, encode_checkpoint, encode_cube, encode_labels,
    encode_split, read_tensor, write_tensor, Checkpoint, Reader,
};
use fcspn::report::{loss_csv, metrics_csv, render_ppm, split_csv, Palette, LOSS_HEADER};
use fcspn::FormatError;
use fcspn_core::data::{synth_scene, HsiCube, LabelMap, SplitCell, SplitMask, SplitStrategy, SynthSpec};
use fcspn_core::metrics::{confusion, Report};
use fcspn_core::model::{Fcspn, ModelConfig};
use fcspn_core::train::LossRecord;
use fcspn_core::Tensor;
use proptest::prelude::*;

fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6f32..1e6f32, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #[test]
    fn tensor_round_trip(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 * 0.37 - 100.0) as f64).collect();
        let t = Tensor::from_vec(&shape, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(buf.len(), 5 + 4 * shape.len() + 4 * n);
        let mut r = Reader::new(&buf);
        prop_assert_eq!(read_tensor(&mut r).unwrap(), t);
        r.finish().unwrap();
    }

    #[test]
    fn cube_round_trip(data in f32_values(3 * 4 * 5)) {
        let cube = HsiCube::from_vec(3, 4, 5, data).unwrap();
        prop_assert_eq!(decode_cube(&encode_cube(&cube).unwrap()).unwrap(), cube);
    }
}

fn scene() -> (HsiCube, LabelMap) {
    synth_scene(&SynthSpec {
        rows: 9,
        cols: 11,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn labels_and_split_round_trip() {
    let (_, labels) = scene();
    let names = vec![
        "Corn-notill".to_string(),
        "Grass, pasture".to_string(),
        "Woods".to_string(),
    ];
    let labels = LabelMap::new(9, 11, labels.ids().to_vec(), names).unwrap();
    assert_eq!(decode_labels(&encode_labels(&labels).unwrap()).unwrap(), labels);

    let split = fcspn_core::data::sample_split(&labels, &SplitStrategy::per_class(5), 1).unwrap();
    assert_eq!(decode_split(&encode_split(&split).unwrap()).unwrap(), split);
}

#[test]
fn checkpoint_round_trip_is_exact_after_one_save() {
    let config = ModelConfig {
        base_channels: 2,
        ..ModelConfig::new(6, 3)
    };
    let (_, params) = Fcspn::seeded(config, 4).unwrap();
    let ckpt = Checkpoint {
        config,
        class_names: LabelMap::default_names(3),
        params,
    };
    let bytes = encode_checkpoint(&ckpt).unwrap();
    let loaded = decode_checkpoint(&bytes).unwrap();
    assert_eq!(loaded.config, config);
    assert_eq!(loaded.class_names, ckpt.class_names);
    for (a, b) in loaded.params.entries().iter().zip(ckpt.params.entries()) {
        assert_eq!((&a.path, a.kind), (&b.path, b.kind));
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-30));
        }
    }
    // Stored values are f32, so a second save reproduces the bytes exactly.
    assert_eq!(encode_checkpoint(&loaded).unwrap(), bytes);
    loaded.network().unwrap();

    let mut wrong = bytes.clone();
    wrong[4] = 2;
    assert!(matches!(
        decode_checkpoint(&wrong),
        Err(FormatError::Version { version: 2, .. })
    ));
    let mut short = ckpt.clone();
    short.class_names.pop();
    assert!(decode_checkpoint(&encode_checkpoint(&short).unwrap()).is_err());
}

#[test]
fn bad_magic_names_the_offset() {
    let (cube, labels) = scene();
    let bytes = encode_cube(&cube).unwrap();
    match decode_labels(&bytes) {
        Err(FormatError::BadMagic {
            expected,
            found,
            offset,
        }) => {
            assert_eq!((expected, found.as_str(), offset), ("HSL1", "HSC1", 0));
        }
        other => panic!("expected bad magic, got {other:?}"),
    }
    let msg = decode_cube(&encode_labels(&labels).unwrap()).unwrap_err().to_string();
    assert!(msg.contains("offset 0"), "{msg}");

    let mut tensor = Vec::new();
    tensor.extend_from_slice(b"XXXX");
    let mut r = Reader::new(&tensor);
    assert!(matches!(
        read_tensor(&mut r),
        Err(FormatError::BadMagic { offset: 0, .. })
    ));
}

#[test]
fn truncation_and_trailing_bytes() {
    let (cube, _) = scene();
    let bytes = encode_cube(&cube).unwrap();
    for cut in [0, 3, 7, 16, bytes.len() - 1] {
        let err = decode_cube(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }), "cut {cut}: {err:?}");
    }
    match decode_cube(&bytes[..bytes.len() - 6]) {
        Err(FormatError::Truncated { offset, needed, .. }) => assert_eq!((offset, needed), (16, 6)),
        other => panic!("{other:?}"),
    }
    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0, 0]);
    assert!(matches!(decode_cube(&long), Err(FormatError::TrailingBytes(3))));
}

fn cube_header(extents: [u32; 3]) -> Vec<u8> {
    let mut out = b"HSC1".to_vec();
    for e in extents {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

#[test]
fn oversized_and_zero_extents() {
    let mut t = b"TSR1".to_vec();
    t.push(3);
    for _ in 0..3 {
        t.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(
        read_tensor(&mut Reader::new(&t)),
        Err(FormatError::ExtentOverflow { .. })
    ));

    let err = decode_cube(&cube_header([u32::MAX, u32::MAX, 2])).unwrap_err();
    assert!(matches!(
        err,
        FormatError::Truncated { .. } | FormatError::ExtentOverflow { .. }
    ));
    assert!(decode_cube(&cube_header([0, 4, 4])).is_err());
}

#[test]
fn full_scene_header() {
    let header = cube_header([204, 145, 145]);
    match decode_cube(&header) {
        Err(FormatError::Truncated { offset, needed, .. }) => assert_eq!((offset, needed), (16, 204 * 145 * 145 * 4)),
        other => panic!("{other:?}"),
    }
    let mut bytes = header;
    bytes.resize(16 + 204 * 145 * 145 * 4, 0);
    let cube = decode_cube(&bytes).unwrap();
    assert_eq!((cube.bands(), cube.rows(), cube.cols()), (204, 145, 145));
}

#[test]
fn config_defaults_and_round_trip() {
    let d = RunConfig::default();
    assert_eq!(
        (d.base_channels, d.dsr_per_stage, d.attention, d.cspn_steps),
        (16, 1, true, 24)
    );
    assert_eq!((d.train.batch_size, d.train.epochs, d.train.crop), (20, 60, [64, 64]));
    assert_eq!(
        (d.train.learning_rate, d.train.momentum, d.train.weight_decay),
        (0.01, 0.9, 1e-5)
    );
    assert_eq!(d.strategy, SplitStrategy::per_class(200));
    assert!(d.normalize && d.train.refine);

    let ini = d.to_ini();
    for (key, _, _) in KEYS {
        assert!(ini.contains(key));
    }
    assert_eq!(RunConfig::parse_str(&ini, Path::new("d.ini")).unwrap(), d);

    let text = "# comment\n[model]\nbase_channels = 8 ; inline\n\n[train]\nepochs=3\n[data]\nstrategy = fraction:0.1\n";
    let cfg = RunConfig::parse_str(text, Path::new("c.ini")).unwrap();
    assert_eq!((cfg.base_channels, cfg.train.epochs), (8, 3));
    assert_eq!(cfg.strategy, SplitStrategy::Fraction(0.1));
    assert_eq!(RunConfig::parse_str(&cfg.to_ini(), Path::new("c.ini")).unwrap(), cfg);
}

#[test]
fn config_errors_carry_line_numbers() {
    let cases = [
        ("model.base_channels = 4\nbogus.key = 1\n", 2, "unknown key"),
        ("[train]\nepochs = 2\nepochs = 3\n", 3, "duplicate"),
        ("[train\n", 1, "unterminated"),
        ("model.attention = maybe\n", 1, "boolean"),
        ("\n\ntrain.epochs\n", 3, "key = value"),
        ("data.strategy = random:3\n", 1, "strategy"),
    ];
    for (text, line, needle) in cases {
        match RunConfig::parse_str(text, Path::new("bad.ini")) {
            Err(e @ ConfigError::Line { .. }) => {
                let msg = e.to_string();
                assert!(msg.starts_with(&format!("bad.ini:{line}:")), "{msg}");
                assert!(msg.contains(needle), "{msg}");
            }
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn overrides_apply_in_order() {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "train.epochs=5".into(),
        "train.epochs = 7".into(),
        "cspn.train=off".into(),
    ])
    .unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert!(!cfg.train.refine);
    assert!(matches!(
        cfg.apply_overrides(&["train.epochs".into()]),
        Err(ConfigError::Override { .. })
    ));
    assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
    assert_eq!(parse_strategy("indian_pines").unwrap(), SplitStrategy::indian_pines());
    assert!(parse_strategy("fraction:0").is_err());
    assert!(parse_strategy("per_class:0").is_err());
}

#[test]
fn palette_and_ppm() {
    let names = LabelMap::default_names(18);
    let p = Palette::generate(&names);
    assert_eq!(p.entries.len(), 18);
    assert_ne!(p.color(1), p.color(17));
    assert_eq!(p.color(0), [0, 0, 0]);
    assert_eq!(Palette::parse_csv(&p.to_csv()).unwrap(), p);
    assert!(Palette::parse_csv("class_id,r,g,b,name\n1,300,0,0,x\n").is_err());

    let (_, labels) = scene();
    let ppm = render_ppm(&labels, &Palette::generate(labels.class_names()));
    let header = b"P6\n11 9\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    assert_eq!(ppm.len(), header.len() + 9 * 11 * 3);
}

#[test]
fn csv_reports() {
    let (_, labels) = scene();
    let test = SplitMask::uniform(&labels, SplitCell::Test);
    let cm = confusion(&labels, &labels, &test, false).unwrap();
    let csv = metrics_csv(&Report::new(&cm, labels.class_names()).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class_id,name,accuracy");
    assert_eq!(lines.len(), 1 + 3 + 3);
    assert!(lines[1].starts_with("1,"));
    assert_eq!(&lines[4..], ["OA,,100.0000", "AA,,100.0000", "kappa,,100.0000"]);

    let split = fcspn_core::data::sample_split(&labels, &SplitStrategy::per_class(4), 0).unwrap();
    let s = split_csv(&labels, &split);
    assert!(s.starts_with("class_id,name,train,test\n"));
    assert_eq!(s.lines().count(), 4);

    let rec = LossRecord {
        epoch: 0,
        step: 1,
        focal: 0.5,
        l2: 0.25,
        total: 0.75,
    };
    let loss = loss_csv(&[rec]);
    let mut rows = loss.lines();
    assert_eq!(rows.next(), Some(LOSS_HEADER));
    let fields: Vec<f64> = rows.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields, [0.0, 1.0, 0.5, 0.25, 0.75]);
}
