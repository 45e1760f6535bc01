//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::{bits, run, schema_errors};
use psconv::analysis::{allocation_report, default_lattice_specs, scale_allocation};
use psconv::conv::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_dilated_reference, conv2d_reference,
    dilated_conv, ConvSpec,
};
use psconv::io::{read_archive, NamedTensor, TensorArchive};
use psconv::lattice::{DilationMatrix, DilationPattern};
use psconv::tensor::{Rng, Tensor4};
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn stdout_json(out: &std::process::Output) -> Result<Value, String> {
    serde_json::from_slice(&out.stdout).map_err(|e| format!("bad JSON on stdout: {e}"))
}

fn schema_ok(name: &str, v: &Value) -> Result<(), String> {
    let errors = schema_errors(name, v);
    ensure(errors.is_empty(), || format!("{name} schema: {errors:?}"))
}

fn strategy_equivalence() -> Outcome {
    let start = Instant::now();
    let out = run(&["check", "--cases", "1000", "--seed", "42", "--tol", "1e-9"]);
    let elapsed = start.elapsed();
    let v = stdout_json(&out)?;
    schema_ok("check", &v)?;
    ensure(out.status.code() == Some(0), || {
        format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let eq = v["suites"]
        .as_array()
        .and_then(|s| s.iter().find(|s| s["name"] == "equivalence"))
        .ok_or("no equivalence suite")?;
    let max = eq["max_error"].as_f64().ok_or("no max_error")?;
    ensure(eq["cases"] == 1000 && max <= 1e-9, || format!("max error {max:e}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 cases, max |diff| {max:e} (masked {:e}, rearranged {:e}), {:.1}s",
        eq["details"]["masked"].as_f64().unwrap_or(f64::NAN),
        eq["details"]["rearranged"].as_f64().unwrap_or(f64::NAN),
        elapsed.as_secs_f64()
    ))
}

/// Random layer drawn from the check grid with the given lattice pattern.
fn random_layer(rng: &mut Rng, small: bool) -> (ConvSpec, Tensor4, Tensor4) {
    let channels: &[usize] = if small { &[4, 8] } else { &[4, 8, 16] };
    let cin = *rng.choose(channels);
    let cout = *rng.choose(channels);
    let groups = 1 + rng.below(2);
    let stride = 1 + rng.below(2);
    let (h, w, n) = if small {
        (5 + rng.below(4), 5 + rng.below(4), 1)
    } else {
        (7 + rng.below(8), 7 + rng.below(8), 1 + rng.below(2))
    };
    let spec = ConvSpec::new(cin, cout, 3, stride, groups).unwrap();
    let f = Tensor4::randn([n, cin, h, w], rng, 1.0).unwrap();
    let g = Tensor4::randn(spec.weight_dims(), rng, 1.0).unwrap();
    (spec, f, g)
}

fn degenerate_reduction() -> Outcome {
    let mut rng = Rng::new(2);
    for case in 0..100 {
        let (spec, f, g) = random_layer(&mut rng, false);
        let d = 1 + rng.below(4) as u32;
        let p = DilationPattern::constant(d).unwrap();
        let lattice = DilationMatrix::psconv_grouped(spec.cout, spec.cin, spec.groups, &p).unwrap();
        let ps = bits(&conv2d_reference(&f, &g, &spec, &lattice).unwrap());
        ensure(ps == bits(&conv2d_dilated_reference(&f, &g, &spec, d).unwrap()), || {
            format!("case {case}: differs from dilated reference")
        })?;
        ensure(ps == bits(&dilated_conv(&f, &g, &spec, d).unwrap()), || {
            format!("case {case}: differs from fast dilated kernel")
        })?;
    }
    Ok("100 cases bit-identical to dilated convolution".into())
}

fn gradient_correctness() -> Outcome {
    let patterns: [&[u32]; 4] = [&[1], &[2], &[1, 2], &[1, 2, 1, 4]];
    let mut rng = Rng::new(3);
    let h = 1e-5;
    let (mut worst_fd, mut worst_adj) = (0.0f64, 0.0f64);
    let mut probes = 0usize;
    for case in 0..50 {
        let (spec, f, g) = random_layer(&mut rng, true);
        let p = DilationPattern::new(rng.choose(&patterns).to_vec()).unwrap();
        let lattice = DilationMatrix::psconv_grouped(spec.cout, spec.cin, spec.groups, &p).unwrap();
        let u = Tensor4::randn(spec.output_dims(f.dims()), &mut rng, 1.0).unwrap();
        let [_, _, ih, iw] = f.dims();
        let gi = conv2d_backward_input(&u, &g, &spec, &lattice, (ih, iw)).unwrap();
        let gw = conv2d_backward_weight(&u, &f, &spec, &lattice).unwrap();
        let loss = |f: &Tensor4, g: &Tensor4| {
            conv2d_reference(f, g, &spec, &lattice).unwrap().dot(&u).unwrap()
        };

        let lhs = loss(&f, &g);
        for rhs in [f.dot(&gi).unwrap(), g.dot(&gw).unwrap()] {
            worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
        }

        // Relative error with the denominator floored at 1: inputs that no
        // tap reaches have zero gradient and are judged absolutely.
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        for (is_input, analytic) in [(true, &gi), (false, &gw)] {
            for _ in 0..8 {
                let idx = rng.below(analytic.len());
                let (mut fp, mut fm, mut gp, mut gm) = (f.clone(), f.clone(), g.clone(), g.clone());
                if is_input {
                    fp.data_mut()[idx] += h;
                    fm.data_mut()[idx] -= h;
                } else {
                    gp.data_mut()[idx] += h;
                    gm.data_mut()[idx] -= h;
                }
                let fd = (loss(&fp, &gp) - loss(&fm, &gm)) / (2.0 * h);
                let e = rel(fd, analytic.data()[idx]);
                ensure(e <= 1e-6, || {
                    format!("case {case} {} idx {idx}: rel {e:e}", if is_input { "input" } else { "weight" })
                })?;
                worst_fd = worst_fd.max(e);
                probes += 1;
            }
        }
    }
    ensure(worst_adj <= 1e-10, || format!("adjoint rel error {worst_adj:e}"))?;
    Ok(format!(
        "50 instances, {probes} probes, worst FD rel {worst_fd:e}, worst adjoint rel {worst_adj:e}"
    ))
}

fn count_parity() -> Outcome {
    let mut summary = Vec::new();
    for arch in ["resnet50", "resnet101", "resnext50_32x4d", "resnext101_32x4d"] {
        let mut totals = Vec::new();
        for variant in ["standard", "psconv"] {
            let out = run(&["count", "--arch", arch, "--variant", variant, "--input", "224"]);
            ensure(out.status.code() == Some(0), || format!("{arch} {variant}: exit {:?}", out.status.code()))?;
            let v = stdout_json(&out)?;
            schema_ok("count", &v)?;
            totals.push((v["total_params"].as_u64().unwrap(), v["total_macs"].as_u64().unwrap()));
        }
        ensure(totals[0] == totals[1], || format!("{arch}: {totals:?}"))?;
        if arch == "resnet50" {
            let (params, macs) = totals[0];
            ensure(params == 25_557_032, || format!("resnet50 params {params}"))?;
            let g = macs as f64 / 1e9;
            ensure((g / 4.089 - 1.0).abs() <= 0.01, || format!("resnet50 GFLOPs {g}"))?;
            summary.push(format!("resnet50 {params} params, {g:.4} GMACs"));
        }
    }
    summary.push("parity exact for all four".into());
    Ok(summary.join("; "))
}

fn lattice_structure() -> Outcome {
    for n in [8, 16, 64] {
        common::verify_default_lattice(n).map_err(|e| format!("n={n}: {e}"))?;
    }
    Ok("Cin=Cout in {8,16,64}: multisets, shift relation, block constancy, permutations".into())
}

fn speed_protocol() -> Outcome {
    let start = Instant::now();
    let out = run(&["bench", "--input", "200,64,56,56", "--cout", "64", "--kernel", "3", "--repeats", "1", "--warmup", "0"]);
    let elapsed = start.elapsed();
    ensure(out.status.code() == Some(0), || {
        format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let v = stdout_json(&out)?;
    schema_ok("bench", &v)?;
    let mut medians = BTreeMap::new();
    for r in v["results"].as_array().ok_or("no results")? {
        let m = r["median_ms"].as_f64().ok_or_else(|| format!("{} has no median", r["strategy"]))?;
        ensure(m > 0.0, || format!("{} median {m}", r["strategy"]))?;
        medians.insert(r["strategy"].as_str().unwrap().to_string(), m);
    }
    ensure(medians.len() == 5, || format!("strategies {:?}", medians.keys()))?;
    let ratio = medians["rearranged"] / medians["masked"];
    ensure(ratio <= 1.5, || format!("rearranged/masked = {ratio:.3}"))?;
    Ok(format!(
        "medians ms: reference {:.0}, masked {:.0}, rearranged {:.0}, dilated {:.0}, standard {:.0}; rearranged/masked {ratio:.2} (single repeat, {:.0}s total)",
        medians["reference"], medians["masked"], medians["rearranged"], medians["dilated"], medians["standard"],
        elapsed.as_secs_f64()
    ))
}

/// Per-rate max over kernels of mean |w|, normalized; scanned cell by cell.
fn allocation_oracle(w: &Tensor4, d: &DilationMatrix) -> BTreeMap<u32, f64> {
    let [cout, cin, kh, kw] = w.dims();
    let mut proxy: BTreeMap<u32, f64> = BTreeMap::new();
    for c in 0..cout {
        for k in 0..cin {
            let mut s = 0.0;
            for i in 0..kh {
                for j in 0..kw {
                    s += w.get(c, k, i, j).abs();
                }
            }
            let mean = s / (kh * kw) as f64;
            let e = proxy.entry(d.get(c, k)).or_insert(0.0);
            if mean > *e {
                *e = mean;
            }
        }
    }
    let total: f64 = proxy.values().sum();
    proxy.into_iter().map(|(r, v)| (r, v / total)).collect()
}

fn scale_allocation_check() -> Outcome {
    let p = DilationPattern::default();
    let mut archive = TensorArchive::new();
    archive
        .push(NamedTensor::f64("stage1.conv.weight", vec![16, 16, 3, 3], vec![0.7; 16 * 16 * 9]))
        .unwrap();
    let report = allocation_report(&archive, &default_lattice_specs(&archive, &p, 1)).map_err(|e| e.to_string())?;
    let layer = report.layer(0);
    ensure(layer.keys().copied().collect::<Vec<_>>() == [1, 2, 4], || format!("{layer:?}"))?;
    for (&rate, &share) in &layer {
        ensure((share - 1.0 / 3.0).abs() <= 1e-12, || format!("rate {rate}: {share}"))?;
    }

    let mut rng = Rng::new(7);
    for (cout, cin) in [(8, 8), (16, 8), (64, 64)] {
        let d = DilationMatrix::psconv(cout, cin, &p).unwrap();
        let w = Tensor4::randn([cout, cin, 3, 3], &mut rng, 1.0).unwrap();
        let got = scale_allocation(&w, &d).map_err(|e| e.to_string())?;
        let want = allocation_oracle(&w, &d);
        ensure(got == want, || format!("{cout}x{cin}: {got:?} vs {want:?}"))?;
    }
    Ok("uniform weights give 1/3 each; random weights equal the exhaustive scan exactly".into())
}

fn end_to_end_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    let mut longest = Duration::ZERO;
    for i in 0..2 {
        let weights = dir.path().join(format!("w{i}.psta"));
        let start = Instant::now();
        let out = run(&[
            "train-demo", "--steps", "200", "--lr", "0.05", "--seed", "1", "--out", weights.to_str().unwrap(),
        ]);
        longest = longest.max(start.elapsed());
        ensure(out.status.code() == Some(0), || format!("exit {:?}", out.status.code()))?;
        let bytes = std::fs::read(&weights).map_err(|e| e.to_string())?;
        runs.push((out.stdout, bytes));
    }
    ensure(runs[0] == runs[1], || "reruns differ".into())?;
    ensure(longest < Duration::from_secs(120), || format!("took {longest:?}"))?;

    let archive = TensorArchive::from_bytes(&runs[0].1).map_err(|e| e.to_string())?;
    ensure(archive.len() == 4, || format!("{} tensors in archive", archive.len()))?;

    let losses: Vec<f64> = String::from_utf8_lossy(&runs[0].0)
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    ensure(losses.len() == 200 && losses.iter().all(|l| l.is_finite()), || "bad log".into())?;
    let per_epoch = 10;
    let first = losses[..per_epoch].iter().sum::<f64>() / per_epoch as f64;
    let last = losses[200 - per_epoch..].iter().sum::<f64>() / per_epoch as f64;
    ensure(last <= 0.5 * first, || format!("first epoch {first:.4}, last {last:.4}"))?;
    Ok(format!(
        "epoch mean loss {first:.4} -> {last:.4} ({:.3}x), archive loads, rerun bit-identical, {:.1}s per run",
        last / first,
        longest.as_secs_f64()
    ))
}

fn io_round_trip() -> Outcome {
    let mut rng = Rng::new(9);
    for i in 0..500 {
        let a = common::random_archive(&mut rng);
        let bytes = a.to_bytes().map_err(|e| e.to_string())?;
        let back = TensorArchive::from_bytes(&bytes).map_err(|e| format!("archive {i}: {e}"))?;
        ensure(common::archives_identical(&a, &back), || format!("archive {i} differs"))?;
    }
    let cases = common::corruption_cases();
    for (what, bytes, code) in &cases {
        match read_archive(bytes) {
            Err(e) if e.code() == *code => {}
            Err(e) => return Err(format!("{what}: code {} ({e}), want {code}", e.code())),
            Ok(_) => return Err(format!("{what}: accepted")),
        }
    }
    Ok(format!("500 archives bit-exact; {} corruption cases give their codes", cases.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("strategy equivalence", strategy_equivalence),
        ("degenerate reduction", degenerate_reduction),
        ("gradient correctness", gradient_correctness),
        ("parameter/MAC counts and parity", count_parity),
        ("lattice structure", lattice_structure),
        ("speed benchmark protocol", speed_protocol),
        ("scale allocation", scale_allocation_check),
        ("end-to-end training", end_to_end_training),
        ("archive round trip", io_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
