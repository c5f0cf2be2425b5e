use ptq_core::io::calibrate::{calibrate_dir, load_dumps, CalibConfig, HookKind};
use ptq_core::io::dump::*;
use ptq_core::io::params::{HookQuantizer, ParamFile};
use ptq_core::io::report::CalibrationReport;
use ptq_core::io::synth::{generate, SynthKind};
use ptq_core::quant::error_metrics;
use ptq_core::toy_net::*;
use ptq_core::Tensor;

#[test]
fn dump_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(SynthKind::Outlier, &[3, 5, 7], 9).unwrap();
    let path = dir.path().join("x.0.ptq4");
    write_dump(&t, &path).unwrap();
    let back = read_dump(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back
        .data()
        .iter()
        .zip(t.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let codes = CodeDump {
        shape: vec![2, 3],
        codes: vec![-7, 0, 1, i32::MAX, i32::MIN, 42],
    };
    write_code_dump(&codes, dir.path().join("c.ptq4")).unwrap();
    assert_eq!(read_code_dump(dir.path().join("c.ptq4")).unwrap(), codes);
    // Kinds are not interchangeable.
    assert!(read_dump(dir.path().join("c.ptq4")).is_err());
    assert!(read_code_dump(&path).is_err());
}

#[test]
fn truncated_and_garbage_dumps_are_rejected() {
    let bytes = encode_dump(&generate(SynthKind::Gelu, &[4, 4], 1).unwrap());
    for n in [0, 3, 8, bytes.len() - 1] {
        assert!(decode_dump(&bytes[..n]).is_err(), "prefix {n}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_dump(&extra).is_err());
    let mut bad_magic = bytes;
    bad_magic[0] ^= 0xff;
    assert!(decode_dump(&bad_magic).is_err());
}

#[test]
fn pipeline_param_file_survives_toml() {
    let (plan, _) = run_seeded(4, &PlanConfig::preset("W6A6").unwrap(), 8, 0).unwrap();
    let file = plan.to_param_file();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.toml");
    file.write(&path).unwrap();
    let back = ParamFile::read(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_toml().unwrap(), file.to_toml().unwrap());

    // Reloaded quantizers reproduce the plan's fake-quantized activations.
    let w = ToyNetWeights::generate(4);
    let x = &calibration_inputs(4, 1)[0];
    let (_, trace) = forward(x, &w, None).unwrap();
    for (hook, q) in &plan.activations {
        let reloaded = back.get(hook.name()).unwrap();
        let t = &trace.activations[hook];
        assert_eq!(
            reloaded.fake(t).unwrap(),
            q.fake(t).unwrap(),
            "{}",
            hook.name()
        );
        assert_eq!(reloaded.encode(t).unwrap(), q.encode(t).unwrap());
    }
}

#[test]
fn unknown_hook_and_bad_toml_are_errors() {
    assert!(ParamFile::default().get("nope").is_err());
    assert!(ParamFile::from_toml("[hooks.x]\nkind = \"nonsense\"").is_err());
    assert!(CalibConfig::from_toml("bogus_key = 1").is_err());
}

fn write_trace_dumps(dir: &std::path::Path, seed: u64, n: usize) {
    let w = ToyNetWeights::generate(seed);
    for (k, x) in calibration_inputs(seed, n).iter().enumerate() {
        let trace = backward_collect(x, &w, &ProxyLoss::default()).unwrap();
        for (h, t) in &trace.activations {
            write_dump(t, dir.join(format!("{}.{k}.ptq4", h.name()))).unwrap();
        }
        for (h, g) in &trace.gradients {
            write_dump(g.tensor(), dir.join(format!("{}.grad.{k}.ptq4", h.name()))).unwrap();
        }
    }
}

#[test]
fn calibrate_dir_on_network_dumps() {
    let dir = tempfile::tempdir().unwrap();
    write_trace_dumps(dir.path(), 0, 6);
    std::fs::write(dir.path().join("README.txt"), "ignored").unwrap();

    let cfg = CalibConfig::from_toml(
        r#"
        preset = "W8A8"
        calib_size = 4
        [hooks]
        "attn.softmax" = "drq_softmax"
        "mlp.gelu" = "drq_gelu"
        "text.linear" = "rorq"
        "decoder.in" = "minmax"
        [[matmul]]
        a = "attn.q"
        b = "attn.k"
        grad = "attn.scores"
        transpose_b = true
        "#,
    )
    .unwrap();
    let (params, report, used) = calibrate_dir(dir.path(), &cfg).unwrap();
    assert_eq!(used, 4);
    let kinds: Vec<(&str, &str)> = params
        .hooks
        .iter()
        .map(|(h, q)| (h.as_str(), q.name()))
        .collect();
    for (hook, name) in [
        ("attn.softmax", "drq"),
        ("mlp.gelu", "drq"),
        ("text.linear", "rorq"),
        ("attn.q", "uniform"),
        ("attn.k", "uniform"),
        ("decoder.in", "uniform"),
    ] {
        assert!(kinds.contains(&(hook, name)), "{hook} -> {name}: {kinds:?}");
    }
    assert_eq!(params.hooks.len(), Hook::ALL.len());

    // Totals and per-hook metrics match a recomputation on the same samples.
    let set = load_dumps(dir.path(), 4).unwrap();
    let mut sum = 0.0;
    for (h, q) in &params.hooks {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for x in &set.activations[h] {
            a.extend_from_slice(x.data());
            b.extend_from_slice(q.fake(x).unwrap().data());
        }
        let m = error_metrics(&a, &b).unwrap();
        let reported = report.hooks[h].metrics.mse;
        assert!((m.mse - reported).abs() <= 1e-12 * m.mse.max(1e-30), "{h}");
        sum += reported;
    }
    assert_eq!(report.totals.hook_count, params.hooks.len());
    assert!((report.totals.hook_mse_sum - sum).abs() <= 1e-12 * sum);
    let json = report.to_json().unwrap();
    assert_eq!(
        CalibrationReport::from_json(&json)
            .unwrap()
            .to_json()
            .unwrap(),
        json
    );

    // The same directory and config give the same files.
    let (p2, r2, _) = calibrate_dir(dir.path(), &cfg).unwrap();
    assert_eq!(p2.to_toml().unwrap(), params.to_toml().unwrap());
    assert_eq!(r2.to_json().unwrap(), json);
}

#[test]
fn calibrate_dir_without_gradients_notes_fallback() {
    let dir = tempfile::tempdir().unwrap();
    for k in 0..3 {
        let t = generate(SynthKind::Softmax, &[8, 8], k).unwrap();
        write_dump(&t, dir.path().join(format!("p.{k}.ptq4"))).unwrap();
    }
    let mut cfg = CalibConfig::default();
    cfg.hooks.insert("p".into(), HookKind::DrqSoftmax);
    let (params, report, used) = calibrate_dir(dir.path(), &cfg).unwrap();
    assert_eq!(used, 3);
    assert!(matches!(params.hooks["p"], HookQuantizer::Drq(_)));
    assert!(
        report.notes.iter().any(|n| n.contains("no gradient dumps")),
        "{:?}",
        report.notes
    );

    cfg.hooks.insert("missing".into(), HookKind::Mse);
    assert!(calibrate_dir(dir.path(), &cfg).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(calibrate_dir(empty.path(), &CalibConfig::default()).is_err());
}

#[test]
fn mask_metrics_from_dumps() {
    use ptq_core::io::masks::tensor_mask_metrics;
    let gt = Tensor::new(vec![2, 4], vec![1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
    let pred = Tensor::new(vec![2, 4], vec![0.9, 0.2, 0., 0., 0., 0., 0., 0.]).unwrap();
    let m = tensor_mask_metrics(&pred, &gt, 0.5).unwrap();
    // Sample 0: IoU 1/2; sample 1: both empty, IoU 1.
    assert!((m.miou - 0.75).abs() < 1e-12);
    assert!((m.oiou - 0.5).abs() < 1e-12);
}
