//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- metrics maskout`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::attention::{attention_oracle, get, random_attention, run_attention, set};
use common::{
    fixed_point_sum, frozen, frozen_tiny, jitter_biases, metrics_oracle, model_gradient_check, rand_t, rng,
};
use painvit::augment::{draw_maskout, maskout, maskout_side, AugmentConfig};
use painvit::dataset::{synth_all, synth_sample, SyntheticSpec};
use painvit::fusion::{
    calibrate_extractor, extract_video_embeddings, Aggregation, DiagramSamples, EmbeddingSet, FusionMethod,
    SampleEmbeddings, Source,
};
use painvit::model::{accounting, PainViT, PainViTConfig};
use painvit::numerics::gradcheck::relative_error;
use painvit::training::{multitask_loss, train, Metrics, TrainConfig};
use painvit::waveform::{render_pair, render_values};
use painvit::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    ((value - target) / target).abs() <= tol
}

// ------------------------------------------------------------ accounting

const PAPER_PARAMS: f64 = 16.46e6;
const PAPER_GFLOPS: f64 = 0.59e9;

fn architecture_accounting() -> Outcome {
    let start = Instant::now();
    let cfg = PainViTConfig::default();
    let params = accounting::count_params(&cfg).map_err(|e| e.to_string())?;
    let macs = accounting::count_macs(&cfg, 224).map_err(|e| e.to_string())?;
    let flops = accounting::count_flops(&cfg, [3, 224, 224]).map_err(|e| e.to_string())?;
    let rows = accounting::breakdown(&cfg, 224).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rows_sum_p: usize = rows.iter().map(|r| r.params).sum();
    let rows_sum_m: u64 = rows.iter().map(|r| r.macs).sum();
    let stage_rows = rows.iter().filter(|r| r.name.starts_with("stages.")).count();
    let ok = within(params as f64, PAPER_PARAMS, 0.15)
        && within(macs as f64, PAPER_GFLOPS, 0.20)
        && rows_sum_p == params
        && rows_sum_m == macs
        && stage_rows == 8
        && elapsed < Duration::from_secs(1);
    check(
        ok,
        format!(
            "params {:.3} M ({:+.1}% vs 16.46 M), compute {:.3} GMAC ({:+.1}% vs 0.59 G; {:.3} GFLOPs at 2 FLOPs/MAC), twins {:.2} M, {} breakdown rows, {:.1} ms",
            params as f64 / 1e6,
            100.0 * (params as f64 / PAPER_PARAMS - 1.0),
            macs as f64 / 1e9,
            100.0 * (macs as f64 / PAPER_GFLOPS - 1.0),
            flops as f64 / 1e9,
            2.0 * params as f64 / 1e6,
            rows.len(),
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

// -------------------------------------------------------- attention oracle

/// Plain softmax(QKᵀ/√d)V attention in matrix form, then output projection
/// and residual.
fn standard_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|u| q[t * d..(t + 1) * d].iter().zip(&k[u * d..(u + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for (u, su) in s.iter().enumerate() {
            let a = (su - m).exp() / z;
            for c in 0..d {
                out[t * d + c] += a * v[u * d + c];
            }
        }
    }
    out
}

fn cascaded_attention_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let (store, ca) = random_attention(8, 2, seed);
        let x = rand_t(&[3, 4, 8], 10_000 + seed);
        let got = run_attention(&store, &ca, &x, (2, 2), true);
        let want = attention_oracle(&store, x.data(), 3, (2, 2), 8, 2, true);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }

    // h = 1 with an identity Q convolution is standard attention
    let mut single: f64 = 0.0;
    for seed in 0..20 {
        let (mut store, ca) = random_attention(8, 1, 500 + seed);
        set(&mut store, "attn.heads.0.q_dw.weight", |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        set(&mut store, "attn.heads.0.q_dw.bias", |_| 0.0);
        let x = rand_t(&[1, 4, 8], 600 + seed);
        let got = run_attention(&store, &ca, &x, (2, 2), true);
        let (n, d) = (4, 8);
        let lin = |w: &str, b: Option<&str>| -> Vec<f64> {
            let w = get(&store, w);
            let b = b.map(|b| get(&store, b));
            (0..n * d)
                .map(|e| {
                    let (t, o) = (e / d, e % d);
                    b.map_or(0.0, |b| b[o]) + (0..d).map(|i| x.data()[t * d + i] * w[i * d + o]).sum::<f64>()
                })
                .collect()
        };
        let q = lin("attn.heads.0.q.weight", Some("attn.heads.0.q.bias"));
        let k = lin("attn.heads.0.k.weight", None);
        let v = lin("attn.heads.0.v.weight", Some("attn.heads.0.v.bias"));
        let a = standard_attention(&q, &k, &v, n, d);
        let (wp, bp) = (get(&store, "attn.proj.weight"), get(&store, "attn.proj.bias"));
        for t in 0..n {
            for o in 0..d {
                let want = x.data()[t * d + o] + bp[o] + (0..d).map(|i| a[t * d + i] * wp[i * d + o]).sum::<f64>();
                single = single.max((got.data()[t * d + o] - want).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-10 && single < 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "h=2 N=4 d=8: max abs error {worst:.2e} over 50 instances; h=1 vs standard attention {single:.2e}; {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------ gradient integrity

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut model = frozen_tiny(224, 21);
    jitter_biases(&mut model, 24);
    let x = rand_t(&[2, 3, 224, 224], 22);
    let g = model_gradient_check(&mut model, &x, 0.01, 1e-5, 23);
    let elapsed = start.elapsed();
    check(
        g.worst < 1e-4 && elapsed < Duration::from_secs(600),
        format!(
            "reduced-width model ({} params, 2 x 224 px, frozen stats): {} sampled scalars ({} settled below h = 1e-5 after a kink crossing), max relative error {:.2e}, {:.1} s",
            model.count_params(),
            g.checked,
            g.refined,
            g.worst,
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------- multi-task loss

fn eval_multitask(w: &[f64], losses: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let wv = g.leaf(&Tensor::new(&[w.len()], w.to_vec()).unwrap().with_requires_grad(true));
    let ls: Vec<_> = losses.iter().map(|&l| Some(g.constant(Tensor::scalar(l)))).collect();
    let total = multitask_loss(&mut g, wv, &ls, false).unwrap();
    let grads = g.backward(total).unwrap();
    (g.value(total).item().unwrap(), grads.get(wv).unwrap().to_vec())
}

fn multitask_contract() -> Outcome {
    let mut r = rng(40);
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t = r.gen_range(1..6);
        let losses: Vec<f64> = (0..t).map(|_| r.gen_range(0.0..5.0)).collect();
        let (at_zero, _) = eval_multitask(&vec![0.0; t], &losses);
        exact &= at_zero == losses.iter().fold(0.0, |a, b| a + b);

        let w: Vec<f64> = (0..t).map(|_| r.gen_range(-2.0..2.0)).collect();
        let (_, grad) = eval_multitask(&w, &losses);
        for i in 0..t {
            let h = 1e-6;
            let mut p = w.clone();
            p[i] += h;
            let mut m = w.clone();
            m[i] -= h;
            let fd = (eval_multitask(&p, &losses).0 - eval_multitask(&m, &losses).0) / (2.0 * h);
            worst = worst.max(relative_error(grad[i], fd));
            worst = worst.max(relative_error(fd, w[i].exp() * losses[i] + 1.0));
        }
    }
    check(
        exact && worst < 1e-6,
        format!("w=0 equals plain sum exactly: {exact}; d/dw vs finite differences and e^w L + 1: max relative error {worst:.2e}"),
    )
}

// --------------------------------------------------------------- waveform

/// FNV-1a over the rendered bytes; pins output across runs and builds.
fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100000001b3))
}

const PINNED_GRAY: u64 = 0xeb4e0ed933b20b61;
const PINNED_PAIR: u64 = 0x33b60da346a8b5a5;

fn pinned_series() -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..300).map(|i| (i as f64 * 0.07).sin() + 0.3 * (i as f64 * 0.31).cos()).collect();
    let b: Vec<f64> = (0..40).map(|i| ((i * i) % 17) as f64 - 8.0).collect();
    (a, b)
}

fn waveform_properties() -> Outcome {
    let (a, b) = pinned_series();
    let g1 = render_values(&a).unwrap().to_bytes();
    let g2 = render_values(&a).unwrap().to_bytes();
    let p1 = render_pair(&a, &b).unwrap().to_bytes();
    let p2 = render_pair(&a, &b).unwrap().to_bytes();
    let (hg, hp) = (fnv(&g1), fnv(&p1));
    let repeat = g1 == g2 && p1 == p2;
    let pinned = hg == PINNED_GRAY && hp == PINNED_PAIR;

    let mut r = rng(50);
    let mut affine = true;
    let mut swap = true;
    for _ in 0..200 {
        let n = r.gen_range(2..600);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let shift = r.gen_range(-100.0..100.0);
        let w: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
        affine &= render_values(&v).unwrap().pixels() == render_values(&w).unwrap().pixels();

        let u: Vec<f64> = (0..r.gen_range(2..300)).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ab = render_pair(&v, &u).unwrap();
        let ba = render_pair(&u, &v).unwrap();
        swap &= ab.channel_mask(0) == ba.channel_mask(2)
            && ab.channel_mask(2) == ba.channel_mask(0)
            && ab.channel_mask(1) == ba.channel_mask(1);
    }
    check(
        repeat && pinned && affine && swap,
        format!(
            "repeat renders identical: {repeat}; digests {hg:016x}/{hp:016x} pinned: {pinned}; positive affine invariance (200 series): {affine}; channel-swap symmetry: {swap}"
        ),
    )
}

// ------------------------------------------------------------------ fusion

fn fusion_properties() -> Outcome {
    let m = frozen_tiny(224, 60);
    let frames: Vec<Tensor> = (0..12).map(|i| rand_t(&[3, 224, 224], 700 + i)).collect();
    let set = extract_video_embeddings(&frames, &m, Aggregation::Addition).unwrap();
    let mut r = rng(61);
    let mut perm_exact = true;
    for _ in 0..20 {
        let mut items = set.per_item().to_vec();
        items.shuffle(&mut r);
        let p = EmbeddingSet::from_items(items, Aggregation::Addition).unwrap();
        perm_exact &= p.fused().data().iter().zip(set.fused().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    // re-extracting from permuted frames
    let mut shuffled = frames.clone();
    shuffled.shuffle(&mut r);
    let again = extract_video_embeddings(&shuffled, &m, Aggregation::Addition).unwrap();
    perm_exact &= again.fused() == set.fused();

    // fused coordinate k is the exactly rounded Σ_i e_i[k]
    let d = set.fused().numel();
    let mut linear_exact = true;
    for k in 0..d {
        let col: Vec<f64> = set.per_item().iter().map(|e| e.data()[k]).collect();
        linear_exact &= fixed_point_sum(&col).map(f64::to_bits) == Some(set.fused().data()[k].to_bits());
    }
    // per-item embeddings are those of each frame alone
    let mut item_err: f64 = 0.0;
    for (f, e) in frames.iter().zip(set.per_item()) {
        let alone = m.embed(&f.clone().reshape(&[1, 3, 224, 224]).unwrap()).unwrap();
        item_err = item_err.max(alone.max_abs_diff(&e.clone().reshape(&[1, d]).unwrap()));
    }

    let full = frozen(PainViTConfig::default(), 62);
    let thirty: Vec<Tensor> = (0..30).map(|i| rand_t(&[3, 224, 224], 800 + i)).collect();
    let cat = extract_video_embeddings(&thirty, &full, Aggregation::Concatenation).unwrap();
    let cat_len = cat.fused().numel();
    let order = cat.per_item().iter().enumerate().all(|(i, e)| &cat.fused().data()[i * 500..(i + 1) * 500] == e.data());
    check(
        perm_exact && linear_exact && item_err < 1e-12 && cat_len == 15_000 && order,
        format!(
            "addition permutation-invariant bit-for-bit: {perm_exact}; fused == exact Σ e_i: {linear_exact} (per-item vs single-frame {item_err:.1e}); 30-frame concatenation length {cat_len}, order kept: {order}"
        ),
    )
}

// -------------------------------------------------------------- end to end

struct SmokeData {
    train: DiagramSamples,
    val: DiagramSamples,
}

fn smoke_data() -> SmokeData {
    let train_spec = SyntheticSpec {
        per_class: 100,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let val_spec = SyntheticSpec {
        per_class: 30,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let mut m1 = PainViT::new(PainViTConfig::tiny(), 1).unwrap();
    let mut frames = Vec::new();
    let mut channels = Vec::new();
    for label in 0..3 {
        for i in 0..2 {
            let s = synth_sample(&train_spec, label, 1000 + i);
            let (hbo, _) = s.series(&[]).unwrap();
            frames.extend([s.frame_tensor(0), s.frame_tensor(15)]);
            channels.extend([hbo[0].clone(), hbo[5].clone()]);
        }
    }
    calibrate_extractor(&mut m1, &frames, &channels).unwrap();
    let extract = |spec: &SyntheticSpec| -> Vec<SampleEmbeddings> {
        synth_all(spec)
            .map(|s| {
                let (hbo, hbr) = s.series(&[]).unwrap();
                SampleEmbeddings::extract(s.id.clone(), s.label, &s.frame_tensors(), &hbo, &hbr, &m1).unwrap()
            })
            .collect()
    };
    let build = |e: &[SampleEmbeddings]| DiagramSamples::build(e, Source::Fusion, FusionMethod::SingleDiagram, 3).unwrap();
    SmokeData {
        train: build(&extract(&train_spec)),
        val: build(&extract(&val_spec)),
    }
}

fn smoke_run(data: &SmokeData, aug: &AugmentConfig) -> f64 {
    let cfg2 = PainViTConfig {
        dims: [32, 48, 64],
        ..PainViTConfig::tiny()
    };
    let mut m2 = PainViT::new(cfg2, 2).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 20,
        warmup_epochs: 2,
        cooldown_epochs: 2,
        batch_size: 8,
        dropout: 0.1,
        ..TrainConfig::default()
    };
    let out = train(&mut m2, &data.train, Some(&data.val), &cfg, aug, 3).unwrap();
    out.best_val_accuracy.unwrap()
}

fn end_to_end_smoke() -> Outcome {
    let start = Instant::now();
    let data = smoke_data();
    let prep = start.elapsed();
    let clean = smoke_run(&data, &AugmentConfig::default());
    let heavy = smoke_run(&data, &AugmentConfig::uniform(0.9, 3));
    let elapsed = start.elapsed();
    check(
        clean >= 0.9 && heavy > 0.7 && elapsed < Duration::from_secs(1800),
        format!(
            "single-diagram pipeline, 100/30 per class, 20 epochs: val accuracy {:.1}% clean, {:.1}% with all augmentation at 0.9 (MaskOut 0.9|3); {:.0} s ({:.0} s extraction)",
            100.0 * clean,
            100.0 * heavy,
            elapsed.as_secs_f64(),
            prep.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn metrics_oracle_check() -> Outcome {
    let mut r = rng(80);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..200);
        let c = r.gen_range(2..7);
        let t: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        // mix of uniform noise and mostly-correct predictors
        let skill = r.gen::<f64>();
        let p: Vec<usize> = t.iter().map(|&y| if r.gen::<f64>() < skill { y } else { r.gen_range(0..c) }).collect();
        let m = Metrics::from_predictions(&p, &t, c).unwrap();
        let o = metrics_oracle(&p, &t, c);
        for (a, b) in [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1].iter().zip(o) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-12, format!("1000 random prediction sets: max abs deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- maskout

fn maskout_check() -> Outcome {
    let mut r = rng(90);
    let mut identity = true;
    for _ in 0..50 {
        let img = rand_t(&[3, 224, 224], r.next_u64());
        identity &= maskout(&img, 0.0, 5, &mut r).unwrap() == img;
    }
    let side = maskout_side(224, 224, 0.125);
    let ones = Tensor::full(&[3, 224, 224], 1.0);
    let mut exact = true;
    let mut trials = 0;
    for k in [1usize, 2, 3, 5, 7] {
        let mut seen = 0;
        let mut seed = 0u64;
        while seen < 20 {
            seed += 1;
            let mut a = rng(seed * 31 + k as u64);
            let mut b = a.clone();
            let corners = draw_maskout(224, 224, 1.0, k, side, &mut a).unwrap();
            let disjoint = corners.iter().enumerate().all(|(i, p)| {
                corners[i + 1..].iter().all(|q| p.0.abs_diff(q.0) >= side || p.1.abs_diff(q.1) >= side)
            });
            if !disjoint {
                continue;
            }
            let out = maskout(&ones, 1.0, k, &mut b).unwrap();
            let zeros = out.data()[..224 * 224].iter().filter(|&&v| v == 0.0).count();
            exact &= zeros == k * side * side;
            for ch in 1..3 {
                let plane = &out.data()[ch * 224 * 224..(ch + 1) * 224 * 224];
                exact &= plane == &out.data()[..224 * 224];
            }
            seen += 1;
            trials += 1;
        }
    }
    check(
        identity && exact && side == 28,
        format!("p=0 identity on 50 images: {identity}; p=1 with k disjoint {side}x{side} squares zeroes k*{} pixels per channel in {trials} draws: {exact}", side * side),
    )
}

// ------------------------------------------------------------ attention maps

fn attention_maps() -> Outcome {
    let mut m = PainViT::new(PainViTConfig::default(), 100).unwrap();
    let batch = rand_t(&[2, 3, 224, 224], 101).data().iter().map(|v| 0.5 + 0.5 * v).collect();
    m.calibrate(&[Tensor::new(&[2, 3, 224, 224], batch).unwrap()]).unwrap();
    let x = Tensor::from_fn(&[1, 3, 224, 224], |i| ((i % 224) as f64 / 224.0).sin());
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for (stage, depth) in [(0, 0), (1, 2), (2, 0), (2, 3)] {
        for a in m.attention_weights(&x, stage, depth).unwrap() {
            let n = a.shape()[1];
            for row in a.data().chunks(n) {
                // round-trip through the text form used by the exporter
                let parsed: f64 = row.iter().map(|v| v.to_string().parse::<f64>().unwrap()).sum();
                worst = worst.max((parsed - 1.0).abs());
                rows += 1;
            }
        }
    }
    let last = m.attention_weights(&x, 2, 3).unwrap();
    let heads = last[0].shape()[0];
    check(
        worst < 1e-12 && heads == 4,
        format!("{rows} exported rows: max |sum - 1| {worst:.1e}; last stage heads {heads} ({:?})", last[0].shape()),
    )
}

// ---------------------------------------------------------------- driver

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("architecture-accounting", architecture_accounting),
    ("cascaded-attention-oracle", cascaded_attention_oracle),
    ("gradient-integrity", gradient_integrity),
    ("multitask-loss-contract", multitask_contract),
    ("waveform-determinism-invariance", waveform_properties),
    ("fusion-properties", fusion_properties),
    ("end-to-end-smoke", end_to_end_smoke),
    ("metrics-oracle", metrics_oracle_check),
    ("maskout", maskout_check),
    ("attention-maps", attention_maps),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .collect();
    let mut failed = 0;
    for (name, f) in &selected {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name:<32} {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name:<32} {d}  [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", selected.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
