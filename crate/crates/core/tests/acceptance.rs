//! Acceptance suite. Runs each criterion in order and prints one line per
//! criterion plus a summary. A failing criterion makes the process exit
//! nonzero only when `ACCEPTANCE_STRICT=1` is set; a panic in the harness
//! itself always does. Pass criterion numbers as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use meshcap::attention::{
    multi_head_self_attention, static_expansion, AttentionMask, AttentionWeights,
    ExpansionMatrix, MemorySlots,
};
use meshcap::autograd::Graph;
use meshcap::checkpoint::Checkpoint;
use meshcap::data::{generate_synthetic, tokenize, CaptionRecord, Split};
use meshcap::decoder::{mesh_layer_forward, mesh_layer_trace, GateOverride, MeshLayer};
use meshcap::encoder::FeatureLevels;
use meshcap::gradcheck::check_variant;
use meshcap::metrics::{corpus_bleu, meteor, rouge_l, sentence_bleu, Smoothing};
use meshcap::model::{Captioner, ModelConfig, Variant};
use meshcap::params::ParamStore;
use meshcap::tensor::Tensor;
use meshcap::train::{run_training, DataSource, EpochLog, Profile, RunConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Naive dense helpers used by the oracles. Row-major `Vec<Vec<f64>>`.

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn naive_mha(query: &Mat, source: &Mat, w: [&Mat; 4], heads: usize, causal: bool, mem: Option<(&Mat, &Mat)>) -> Mat {
    let [wq, wk, wv, wo] = w;
    let q = mm(query, wq);
    let mut k = mm(source, wk);
    let mut v = mm(source, wv);
    if let Some((mk, mv)) = mem {
        k.extend(mk.iter().cloned());
        v.extend(mv.iter().cloned());
    }
    let d = wq.len();
    let dk = d / heads;
    let mut joined = vec![Vec::with_capacity(d); q.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * dk, dk), cols(&k, h * dk, dk), cols(&v, h * dk, dk));
        for i in 0..qh.len() {
            let mut scores: Vec<f64> = (0..kh.len())
                .map(|j| {
                    if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        (0..dk).map(|t| qh[i][t] * kh[j][t]).sum::<f64>() / (dk as f64).sqrt()
                    }
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter_mut().for_each(|s| *s = (*s - mx).exp());
            let z: f64 = scores.iter().sum();
            for t in 0..dk {
                let mut acc = 0.0;
                for j in 0..kh.len() {
                    acc += scores[j] / z * vh[j][t];
                }
                joined[i].push(acc);
            }
        }
    }
    mm(&joined, wo)
}

fn naive_static_expansion(x: &Mat, p: &Mat) -> Mat {
    let (f, d, l) = (x.len(), x[0].len(), p[0].len());
    let mut m = vec![vec![0.0; l]; f];
    for i in 0..f {
        for j in 0..l {
            let mut s = 0.0;
            for k in 0..d {
                s += x[i][k] * p[k][j];
            }
            m[i][j] = s.max(0.0);
        }
        let n = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            m[i].iter_mut().for_each(|v| *v /= n);
        }
    }
    // expanded[j][k] = sum_i m[i][j] x[i][k]
    let mut expanded = vec![vec![0.0; d]; l];
    for j in 0..l {
        for k in 0..d {
            for i in 0..f {
                expanded[j][k] += m[i][j] * x[i][k];
            }
        }
    }
    let mut out = vec![vec![0.0; d]; f];
    for i in 0..f {
        for k in 0..d {
            for j in 0..l {
                out[i][k] += m[i][j] * expanded[j][k];
            }
        }
    }
    out
}

fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.numel());
    flat.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rand_mat(rows: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[rows, c], 1.0, rng)
}

fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let heads = [1, 2, 3][rng.gen_range(0..3)];
    (heads, heads * rng.gen_range(1..4))
}

// ---------------------------------------------------------------------------

fn c1_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    for v in Variant::ALL {
        let r = check_variant(v, 0, None).map_err(e2s)?;
        ensure(r.passed(1e-4), || {
            let g = r.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
            format!("{v}: max rel error {:.3e} in {}", r.max_rel_error, g.name)
        })?;
        worst.push(format!("{v} {:.1e}", r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max rel error {}; {secs:.1}s", worst.join(", ")))
}

fn c2_mechanism_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut se, mut ma, mut ml) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        // Static expansion.
        let (_, d) = rand_dims(&mut rng);
        let f = rng.gen_range(1..7);
        let l = rng.gen_range(1..9);
        let mut store = ParamStore::new();
        let p = ExpansionMatrix::register(&mut store, "x", d, l, &mut rng).map_err(e2s)?;
        let x = rand_mat(f, d, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = static_expansion(&mut g, &store, xv, &p).map_err(e2s)?;
        se = se.max(max_diff(&naive_static_expansion(&mat(&x), &mat(store.tensor(p.p))), g.value(out)));

        // Memory-augmented self-attention.
        let (heads, d) = rand_dims(&mut rng);
        let n_mem = rng.gen_range(1..5);
        let mut store = ParamStore::new();
        let w = AttentionWeights::register(&mut store, "a", d, heads, &mut rng).map_err(e2s)?;
        let mem = MemorySlots::register(&mut store, "a", n_mem, d, &mut rng).map_err(e2s)?;
        let x = rand_mat(f, d, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = multi_head_self_attention(&mut g, &store, xv, &w, AttentionMask::None, Some(&mem)).map_err(e2s)?;
        let (mk, mv) = mem.slots.unwrap();
        let ws = [w.wq, w.wk, w.wv, w.wo].map(|id| mat(store.tensor(id)));
        let want = naive_mha(
            &mat(&x),
            &mat(&x),
            [&ws[0], &ws[1], &ws[2], &ws[3]],
            heads,
            false,
            Some((&mat(store.tensor(mk)), &mat(store.tensor(mv)))),
        );
        ma = ma.max(max_diff(&want, g.value(out)));

        // Mesh layer.
        let (heads, d) = rand_dims(&mut rng);
        let t_len = rng.gen_range(1..6);
        let n_levels = rng.gen_range(1..5);
        let mut store = ParamStore::new();
        let layer = MeshLayer::register(&mut store, "m", d, heads, true, &mut rng).map_err(e2s)?;
        let meshcap::decoder::LevelFusion::Mesh(gate) = layer.fusion.clone() else {
            return Err("mesh layer registered without a gate".into());
        };
        *store.tensor_mut(gate.b) = Tensor::randn(&[d], 0.5, &mut rng);
        let levels: Vec<Tensor> = (0..n_levels).map(|_| rand_mat(f, d, &mut rng)).collect();
        let d_prev = rand_mat(t_len, d, &mut rng);
        let mut g = Graph::new();
        let lv = levels.iter().map(|t| g.input(t.clone())).collect();
        let fl = FeatureLevels::new(lv).map_err(e2s)?;
        let dp = g.input(d_prev.clone());
        let out = mesh_layer_forward(&mut g, &store, dp, &fl, &layer).map_err(e2s)?;

        let sw = [layer.self_attn.wq, layer.self_attn.wk, layer.self_attn.wv, layer.self_attn.wo].map(|id| mat(store.tensor(id)));
        let cw = [layer.cross_attn.wq, layer.cross_attn.wk, layer.cross_attn.wv, layer.cross_attn.wo]
            .map(|id| mat(store.tensor(id)));
        let d_a = naive_mha(&mat(&d_prev), &mat(&d_prev), [&sw[0], &sw[1], &sw[2], &sw[3]], heads, true, None);
        let gw = mat(store.tensor(gate.w));
        let gb = store.tensor(gate.b).data().to_vec();
        let mut want = vec![vec![0.0; d]; t_len];
        for level in &levels {
            let t = naive_mha(&d_a, &mat(level), [&cw[0], &cw[1], &cw[2], &cw[3]], heads, false, None);
            for i in 0..t_len {
                for j in 0..d {
                    let mut pre = gb[j];
                    for k in 0..d {
                        pre += t[i][k] * gw[k][j] + d_a[i][k] * gw[d + k][j];
                    }
                    let r = 1.0 / (1.0 + (-pre).exp());
                    want[i][j] += r * t[i][j];
                }
            }
        }
        ml = ml.max(max_diff(&want, g.value(out)));
    }
    let tol = 1e-10;
    ensure(se <= tol && ma <= tol && ml <= tol, || {
        format!("max abs diff static {se:.2e}, memory {ma:.2e}, mesh {ml:.2e} exceed {tol:.0e}")
    })?;
    Ok(format!("20 instances each; max abs diff static {se:.1e}, memory {ma:.1e}, mesh {ml:.1e}"))
}

fn c3_degenerate_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut single_level = 0.0f64;
    let mut identity = 0.0f64;
    for _ in 0..20 {
        let (heads, d) = rand_dims(&mut rng);
        let f = rng.gen_range(1..7);
        let mut store = ParamStore::new();
        let w = AttentionWeights::register(&mut store, "a", d, heads, &mut rng).map_err(e2s)?;
        let empty = MemorySlots::register(&mut store, "a", 0, d, &mut rng).map_err(e2s)?;
        let x = rand_mat(f, d, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let with = multi_head_self_attention(&mut g, &store, xv, &w, AttentionMask::None, Some(&empty)).map_err(e2s)?;
        let without = multi_head_self_attention(&mut g, &store, xv, &w, AttentionMask::None, None).map_err(e2s)?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(g.value(with)) == bits(g.value(without)), || "n_mem = 0 differs from plain attention".into())?;

        let layer = MeshLayer::register(&mut store, "m", d, heads, true, &mut rng).map_err(e2s)?;
        let level = g.input(rand_mat(f, d, &mut rng));
        let dp = g.input(rand_mat(rng.gen_range(1..5), d, &mut rng));
        let fl = FeatureLevels::new(vec![level]).map_err(e2s)?;
        let tr = mesh_layer_trace(&mut g, &store, dp, &fl, &layer, GateOverride::Sigmoid).map_err(e2s)?;
        let (r, t, o) = (g.value(tr.gates[0]), g.value(tr.cross[0]), g.value(tr.output));
        for ((r, t), o) in r.data().iter().zip(t.data()).zip(o.data()) {
            single_level = single_level.max((r * t - o).abs());
        }

        let l = rng.gen_range(1..9);
        let p = ExpansionMatrix::register(&mut store, "x", d, l, &mut rng).map_err(e2s)?;
        let mut row = rand_mat(1, d, &mut rng);
        // Identity needs a nonzero expansion row; flip the sign until some
        // projection is positive.
        let proj: f64 = (0..l)
            .map(|j| (0..d).map(|k| row.data()[k] * store.tensor(p.p).data()[k * l + j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if proj <= 0.0 {
            row.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        let xv = g.input(row.clone());
        let out = static_expansion(&mut g, &store, xv, &p).map_err(e2s)?;
        for (a, b) in g.value(out).data().iter().zip(row.data()) {
            identity = identity.max((a - b).abs());
        }
    }
    ensure(single_level == 0.0, || format!("single-level mesh differs from R1*T1 by {single_level:.2e}"))?;
    ensure(identity <= 1e-12, || format!("F = 1 static expansion differs from identity by {identity:.2e}"))?;
    Ok(format!("n_mem=0 bitwise on 20 instances; single level exact; F=1 identity within {identity:.1e}"))
}

fn c4_causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for v in Variant::ALL {
        let cfg = ModelConfig { max_len: 8, seed: 4, ..ModelConfig::micro(v) };
        let model = Captioner::new(cfg.clone()).map_err(e2s)?;
        let image = Tensor::randn(&[cfg.image_size, cfg.image_size, cfg.channels], 0.3, &mut rng);
        let ids: Vec<usize> = (0..8).map(|_| rng.gen_range(1..cfg.vocab_size)).collect();
        let base = model.logits(&image, &ids).map_err(e2s)?;
        for t in 0..8 {
            let mut other = ids.clone();
            for id in other.iter_mut().skip(t + 1) {
                *id = (*id + rng.gen_range(1..cfg.vocab_size)) % cfg.vocab_size;
            }
            let pert = model.logits(&image, &other).map_err(e2s)?;
            let n = (t + 1) * cfg.vocab_size;
            for (a, b) in base.data()[..n].iter().zip(&pert.data()[..n]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("max abs diff {worst:.2e}"))?;
    Ok(format!("all variants, every t on L=8; max abs diff {worst:.1e}"))
}

fn overfit_records() -> Vec<CaptionRecord> {
    let mut recs = generate_synthetic(32, 0).expect("synthetic data");
    for r in &mut recs {
        r.split = Split::Train;
    }
    recs
}

fn overfit(variant: Variant) -> Result<(u32, f64, f64, f64), String> {
    let mut cfg = RunConfig::preset(Profile::Toy, variant);
    cfg.workers = 1;
    let mut trainer = Trainer::new(cfg, overfit_records()).map_err(e2s)?;
    let start = Instant::now();
    let train = trainer.train.clone();
    let (mut loss, mut bleu) = (f64::INFINITY, 0.0);
    while trainer.epoch < 300 {
        trainer.train_epoch().map_err(e2s)?;
        if trainer.epoch % 10 == 0 {
            loss = trainer.train_loss().map_err(e2s)?;
            if loss <= 0.1 {
                bleu = trainer.evaluate(&train).map_err(e2s)?.bleu4;
                if bleu >= 0.95 {
                    break;
                }
            }
        }
    }
    Ok((trainer.epoch, loss, bleu, start.elapsed().as_secs_f64()))
}

fn c5_overfit() -> Outcome {
    let mut parts = Vec::new();
    for v in [Variant::M5, Variant::M1] {
        let (epoch, loss, bleu, secs) = overfit(v)?;
        let summary = format!("{v} epoch {epoch} loss {loss:.3} BLEU-4 {bleu:.3} {secs:.0}s");
        ensure(loss <= 0.1 && bleu >= 0.95 && secs < 600.0, || summary.clone())?;
        parts.push(summary);
    }
    Ok(parts.join("; "))
}

fn ablation_bleu(variant: Variant, seed: u64) -> Result<f64, String> {
    let mut cfg = RunConfig::preset(Profile::Toy, variant);
    cfg.seed = seed;
    cfg.data = DataSource::Synthetic { n: 512, seed };
    let records = cfg.data.load().map_err(e2s)?;
    let mut trainer = Trainer::new(cfg.clone(), records).map_err(e2s)?;
    while trainer.epoch < cfg.epochs {
        trainer.train_epoch().map_err(e2s)?;
    }
    let val = trainer.val.clone();
    Ok(trainer.evaluate(&val).map_err(e2s)?.bleu4)
}

fn c6_ablation() -> Outcome {
    let mut m5 = Vec::new();
    let mut m1 = Vec::new();
    for seed in 0..3 {
        m5.push(ablation_bleu(Variant::M5, seed)?);
        m1.push(ablation_bleu(Variant::M1, seed)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|b| format!("{b:.3}")).collect::<Vec<_>>().join("/");
    let summary = format!(
        "val BLEU-4 per seed m5 {} m1 {}; mean m5 {:.3} m1 {:.3}",
        fmt(&m5),
        fmt(&m1),
        mean(&m5),
        mean(&m1)
    );
    ensure(mean(&m5) >= mean(&m1) - 0.02, || summary.clone())?;
    Ok(summary)
}

fn c7_metrics() -> Outcome {
    let t = |s: &str| tokenize(s);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let checks = [
        ("identical BLEU-4", sentence_bleu(&t("a red square"), &[t("a red square")], 3, Smoothing::None).map_err(e2s)?, 1.0),
        ("brevity BLEU-1", sentence_bleu(&t("the cat"), &[t("the cat sat")], 1, Smoothing::None).map_err(e2s)?, (-0.5f64).exp()),
        ("zero 4-grams", sentence_bleu(&t("a b c d"), &[t("d c b a")], 4, Smoothing::None).map_err(e2s)?, 0.0),
        ("identical ROUGE-L", rouge_l(&t("a b c"), &[t("a b c")]).map_err(e2s)?, 1.0),
        ("LCS ROUGE-L", rouge_l(&t("a b c"), &[t("a c d")]).map_err(e2s)?, 2.0 / 3.0),
        ("disjoint ROUGE-L", rouge_l(&t("a b"), &[t("c d")]).map_err(e2s)?, 0.0),
        ("identical METEOR", meteor(&t("a red square"), &[t("a red square")]).map_err(e2s)?, 1.0),
        ("disjoint METEOR", meteor(&t("a b"), &[t("c d")]).map_err(e2s)?, 0.0),
        ("swapped METEOR", meteor(&t("b a"), &[t("a b")]).map_err(e2s)?, 0.5),
    ];
    for (name, got, want) in checks {
        ensure(close(got, want), || format!("{name}: {got} vs {want}"))?;
    }
    let golden: serde_json::Value =
        serde_json::from_str(include_str!("data/metrics_golden.json")).map_err(e2s)?;
    let pairs = golden["pairs"].as_array().ok_or("golden file has no pairs")?;
    ensure(pairs.len() == 20, || format!("{} golden pairs", pairs.len()))?;
    let text = |v: &serde_json::Value| tokenize(v.as_str().unwrap_or_default());
    let mut worst = 0.0f64;
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for p in pairs {
        let c = text(&p["candidate"]);
        let r: Vec<_> = p["references"].as_array().ok_or("references")?.iter().map(text).collect();
        for n in 1..=4 {
            let got = sentence_bleu(&c, &r, n, Smoothing::None).map_err(e2s)?;
            worst = worst.max((got - p[format!("bleu{n}")].as_f64().unwrap_or(f64::NAN)).abs());
        }
        worst = worst.max((meteor(&c, &r).map_err(e2s)? - p["meteor"].as_f64().unwrap_or(f64::NAN)).abs());
        worst = worst.max((rouge_l(&c, &r).map_err(e2s)? - p["rougeL"].as_f64().unwrap_or(f64::NAN)).abs());
        cands.push(c);
        refs.push(r);
    }
    for n in 1..=4 {
        let got = corpus_bleu(&cands, &refs, n, Smoothing::None).map_err(e2s)?;
        worst = worst.max((got - golden["corpus"][format!("bleu{n}")].as_f64().unwrap_or(f64::NAN)).abs());
    }
    ensure(worst <= 1e-6, || format!("golden max abs diff {worst:.2e}"))?;
    Ok(format!("{} hand examples; 20 golden pairs + corpus BLEU, max abs diff {worst:.1e}", checks.len()))
}

fn read_logs(dir: &Path) -> Result<Vec<EpochLog>, String> {
    let text = std::fs::read_to_string(dir.join("logs.jsonl")).map_err(e2s)?;
    text.lines().map(|l| serde_json::from_str(l).map_err(e2s)).collect()
}

fn c8_lr_schedule() -> Outcome {
    let paper = RunConfig::preset(Profile::Paper, Variant::M5).lr;
    ensure((paper.base, paper.decay, paper.constant_epochs) == (1e-4, 0.95, 5), || format!("paper schedule {paper:?}"))?;
    let dir = tempfile::tempdir().map_err(e2s)?;
    let out = dir.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_meshcap"))
        .args(["train", "--profile", "toy", "--variant", "m1", "--lr", "1e-4", "--lr-decay", "0.95"])
        .args(["--constant-epochs", "5", "--epochs", "12", "--n", "20", "--out"])
        .arg(&out)
        .output()
        .map_err(e2s)?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let logs = read_logs(&out)?;
    ensure(logs.len() == 12, || format!("{} log lines", logs.len()))?;
    for log in &logs {
        let e = log.epoch as i32;
        let want = if e <= 4 { 1e-4 } else { 1e-4 * 0.95f64.powi(e - 4) };
        ensure(log.lr == want, || format!("epoch {e}: lr {} vs {want}", log.lr))?;
    }
    Ok(format!("12 logged epochs exact; last lr {:e}", logs[11].lr))
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    // Both runs share one output path because the checkpoint records it.
    let out = dir.path().join("run");
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let mut cfg = RunConfig::preset(Profile::Toy, Variant::M5);
        cfg.epochs = 2;
        cfg.seed = 11;
        cfg.data = DataSource::Synthetic { n: 40, seed: 3 };
        cfg.out = out.clone();
        run_training(cfg, None).map_err(e2s)?;
        let logs = std::fs::read(out.join("logs.jsonl")).map_err(e2s)?;
        let ckpt = std::fs::read(out.join("checkpoints/final.ckpt")).map_err(e2s)?;
        Ok((logs, ckpt))
    };
    let (la, ca) = run()?;
    let (lb, cb) = run()?;
    ensure(la == lb, || "logs differ between identical runs".into())?;
    ensure(ca == cb, || "final checkpoints differ between identical runs".into())?;

    let path = out.join("checkpoints/final.ckpt");
    let ckpt = Checkpoint::load(&path).map_err(e2s)?;
    let cfg = ckpt.config.clone();
    let records = generate_synthetic(40, 3).map_err(e2s)?;
    let mut trainer_cfg = RunConfig::preset(Profile::Toy, Variant::M5);
    trainer_cfg.epochs = 2;
    trainer_cfg.seed = 11;
    let mut trainer = Trainer::new(trainer_cfg, records.clone()).map_err(e2s)?;
    trainer.train_epoch().map_err(e2s)?;
    trainer.train_epoch().map_err(e2s)?;
    let (loaded, vocab, _) = ckpt.into_model().map_err(e2s)?;
    ensure(vocab == trainer.vocab, || "vocabulary changed".into())?;
    ensure(loaded.config == cfg, || "config changed".into())?;
    let mut compared = 0;
    for r in records.iter().take(5) {
        let image = r.pixels().map_err(e2s)?;
        let ids = trainer.vocab.encode(&r.captions[0], cfg.max_len).map_err(e2s)?.ids;
        let a = trainer.model.logits(&image, &ids).map_err(e2s)?;
        let b = loaded.logits(&image, &ids).map_err(e2s)?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a) == bits(&b), || "reloaded logits differ".into())?;
        compared += a.numel();
    }
    Ok(format!("logs and checkpoints byte-identical; {compared} reloaded logits bitwise equal"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", c1_gradient_fidelity),
        ("mechanism oracles", c2_mechanism_oracles),
        ("degenerate reductions", c3_degenerate_reductions),
        ("causality", c4_causality),
        ("overfit", c5_overfit),
        ("ablation direction", c6_ablation),
        ("metric goldens", c7_metrics),
        ("lr schedule", c8_lr_schedule),
        ("determinism and persistence", c9_determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut ran, mut failed) = (0, 0);
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
