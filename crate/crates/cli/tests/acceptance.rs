//! Acceptance checks, one line of output per criterion.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ltricd_cli::config::{ModelSection, RunConfig};
use ltricd_cli::evaluate::pairs_for;
use ltricd_cli::harness::{compare_orderings, curve, rows_to_csv};
use ltricd_core::corpus::deid::SurrogateRules;
use ltricd_core::corpus::synth::{generate_synthetic_corpus, CountDistribution, SynthConfig};
use ltricd_core::icd::{CodeKind, CodeVocabulary, IcdCode};
use ltricd_core::metrics::{cg_at_k, map_at_k, micro_prf_at_k, ndcg_at_k, EvalPair};
use ltricd_core::model::{
    beam_search, classifier_logits, decoder::teacher_forcing, decoder_log_probs, decoder_memory, encode, greedy,
    is_decoder, is_encoder, is_head, label_attention, Model, ModelConfig, StepScorer,
};
use ltricd_core::ordering::{parse_sequence, OrderingStrategy};
use ltricd_core::predict::{predict_all, PredictConfig};
use ltricd_core::ranking::{dedup_first, merge, postprocess_generated, RankedPrediction};
use ltricd_core::training::losses::{combined_loss, dice_loss, focal_loss, generative_nll};
use ltricd_core::training::{param_digest, prepare, TrainConfig, Trainer, TrainingData};
use ltricd_tensor::{ParamStore, Tape, Tensor};
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

fn within(elapsed: Duration, budget_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s, || {
        format!("{what} took {:.1}s, budget {budget_s}s", elapsed.as_secs_f64())
    })
}

// ---------------------------------------------------------------- 1

fn micro_config() -> ModelConfig {
    ModelConfig {
        token_vocab: 10,
        n_labels: 3,
        d_e: 4,
        d_c: 4,
        kernel: 3,
        segment_len: 4,
        max_input_len: 8,
        d_ff: 6,
        d_dec: 4,
        dec_ff: 6,
        max_output_len: 5,
    }
}

/// Focal, Dice, generative and combined losses of one example.
fn four_losses(params: &ParamStore, grads: bool) -> ([f64; 4], Vec<HashMap<String, Tensor>>) {
    let cfg = micro_config();
    let ids = [3, 7, 2, 9, 4, 5, 0, 0];
    let mask = [true, true, true, true, true, true, false, false];
    let labels = [1.0, 0.0, 1.0];
    let (inputs, targets) = teacher_forcing(&cfg, &[2, 0]).unwrap();
    let mut values = [0.0; 4];
    let mut all_grads = Vec::new();
    for which in 0..4 {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, |_| true);
        let h = encode(&mut tape, &b, &cfg, &ids, &mask).unwrap();
        let head = classifier_logits(&mut tape, &b, h).unwrap();
        let focal = focal_loss(&mut tape, head.logits, &labels, 2.0).unwrap();
        let loss = match which {
            0 => focal,
            1 => dice_loss(&mut tape, head.block1, head.block2, &labels, 1e-8).unwrap(),
            _ => {
                let mem = decoder_memory(&mut tape, &b, h, &mask).unwrap();
                let lp = decoder_log_probs(&mut tape, &b, &cfg, &mem, &inputs).unwrap();
                let nll = generative_nll(&mut tape, lp, &targets).unwrap();
                if which == 2 {
                    nll
                } else {
                    combined_loss(&mut tape, focal, nll, 0.02).unwrap()
                }
            }
        };
        values[which] = tape.value(loss).unwrap().item().unwrap();
        if grads {
            tape.backward(loss).unwrap();
            let g = b.gradients(&tape);
            all_grads.push(g.iter().map(|(n, t)| (n.to_string(), t.clone())).collect());
        }
    }
    (values, all_grads)
}

fn group_of(name: &str) -> &'static str {
    if name.ends_with("embedding") && name.starts_with("encoder.") {
        "embeddings"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else if name.ends_with(".w1c") {
        "W1c"
    } else if name.ends_with(".w2c") {
        "W2c"
    } else if name.ends_with(".p") {
        "P"
    } else if name.ends_with(".v") {
        "V"
    } else if name.ends_with(".b") && name.starts_with("head.") {
        "b"
    } else {
        "decoder"
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = micro_config();
    let mut model = Model::init(cfg, 11).unwrap();
    // Nonzero biases and P so that every group carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, t) in model.params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let (_, analytic) = four_losses(&model.params, true);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let step = 1e-5;
    let mut worst: HashMap<&'static str, f64> = HashMap::new();
    let loss_names = ["focal", "dice", "generative", "combined"];
    let mut failures = Vec::new();
    for name in &names {
        let n = model.params.get(name).unwrap().len();
        let mut fd = vec![vec![0.0; n]; 4];
        for i in 0..n {
            let orig = model.params.get(name).unwrap().data()[i];
            model.params.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let (plus, _) = four_losses(&model.params, false);
            model.params.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let (minus, _) = four_losses(&model.params, false);
            model.params.get_mut(name).unwrap().data_mut()[i] = orig;
            for l in 0..4 {
                fd[l][i] = (plus[l] - minus[l]) / (2.0 * step);
            }
        }
        for l in 0..4 {
            let zeros = vec![0.0; n];
            let a = analytic[l].get(name).map(|t| t.data()).unwrap_or(&zeros);
            let diff: f64 = a.iter().zip(&fd[l]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nf = fd[l].iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = if na.max(nf) == 0.0 { 0.0 } else { diff / na.max(nf) };
            let w = worst.entry(group_of(name)).or_insert(0.0);
            *w = w.max(rel);
            if rel > 1e-4 {
                failures.push(format!("{name}/{}: {rel:.2e}", loss_names[l]));
            }
        }
    }
    ensure(failures.is_empty(), || failures.join(", "))?;
    let groups = ["embeddings", "encoder", "W1c", "W2c", "P", "V", "b", "decoder"];
    ensure(groups.iter().all(|g| worst.contains_key(g)), || format!("groups seen: {:?}", worst.keys()))?;
    within(start.elapsed(), 30.0, "gradient check")?;
    let summary: Vec<String> = groups.iter().map(|g| format!("{g} {:.1e}", worst[g])).collect();
    Ok(format!("max rel err per group: {}", summary.join(", ")))
}

// ---------------------------------------------------------------- 2

/// Straight-line recomputation of one label-attention block.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(
    h: &[Vec<f64>],
    w1: &[Vec<Vec<f64>>],
    w2: &[Vec<Vec<f64>>],
    p: &[f64],
    v: &[Vec<f64>],
    b: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = h.len();
    let k = w1.len();
    let half = (k - 1) / 2;
    let conv = |x: &[Vec<f64>], w: &[Vec<Vec<f64>>]| -> Vec<Vec<f64>> {
        let cout = w[0][0].len();
        (0..n)
            .map(|t| {
                (0..cout)
                    .map(|o| {
                        let mut acc = 0.0;
                        for (j, wj) in w.iter().enumerate() {
                            let src = t as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < n {
                                for (i, xi) in x[src as usize].iter().enumerate() {
                                    acc += xi * wj[i][o];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let z: Vec<Vec<f64>> = conv(h, w1).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
    let s = conv(&z, w2);
    let labels = v.len();
    let mut a = vec![vec![0.0; labels]; n];
    for l in 0..labels {
        let col: Vec<f64> = (0..n).map(|t| s[t][l] + p[t]).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = col.iter().map(|x| (x - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        for t in 0..n {
            a[t][l] = e[t] / sum;
        }
    }
    let logits = (0..labels)
        .map(|l| {
            let mut acc = b[l];
            for d in 0..h[0].len() {
                let r: f64 = (0..n).map(|t| a[t][l] * h[t][d]).sum();
                acc += r * v[l][d];
            }
            acc
        })
        .collect();
    (a, logits)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let de = rng.random_range(1..=5);
        let dc = rng.random_range(1..=5);
        let l = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let h = random_matrix(&mut rng, n, de);
        let w1: Vec<_> = (0..k).map(|_| random_matrix(&mut rng, de, dc)).collect();
        let w2: Vec<_> = (0..k).map(|_| random_matrix(&mut rng, dc, l)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = random_matrix(&mut rng, l, de);
        let b: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a_ref, logits_ref) = attention_oracle(&h, &w1, &w2, &p, &v, &b);

        let flat3 = |w: &[Vec<Vec<f64>>]| w.iter().flatten().flatten().copied().collect::<Vec<f64>>();
        let mut params = ParamStore::new();
        params.insert("blk.w1c", Tensor::new(vec![k, de, dc], flat3(&w1)).unwrap());
        params.insert("blk.w2c", Tensor::new(vec![k, dc, l], flat3(&w2)).unwrap());
        params.insert("blk.p", Tensor::new(vec![n, 1], p.clone()).unwrap());
        params.insert("blk.v", Tensor::from_rows(&v).unwrap());
        params.insert("blk.b", Tensor::from_vec(b.clone()));
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, |_| true);
        let hv = tape.constant(Tensor::from_rows(&h).unwrap());
        let (a, logits) = label_attention(&mut tape, &bind, "blk", hv).unwrap();
        let a = tape.value(a).unwrap();
        let logits = tape.value(logits).unwrap();
        for t in 0..n {
            for j in 0..l {
                worst = worst.max((a.at2(t, j) - a_ref[t][j]).abs());
            }
        }
        for j in 0..l {
            worst = worst.max((logits.data()[j] - logits_ref[j]).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("max abs deviation {worst:.3e}"))?;
    within(start.elapsed(), 10.0, "oracle comparison")?;
    Ok(format!("100 instances, max abs deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3, 4

struct Brute {
    p: f64,
    r: f64,
    f1: f64,
    map: f64,
    ndcg: f64,
    cg: f64,
}

fn brute_ndcg(pairs: &[EvalPair<u32>], k: usize) -> f64 {
    let mut total = 0.0;
    let mut docs = 0;
    for pair in pairs {
        if pair.gold.is_empty() {
            continue;
        }
        docs += 1;
        let mut dcg = 0.0;
        let mut ideal = 0.0;
        for i in 0..k {
            let w = 1.0 / ((i + 2) as f64).log2();
            if i < pair.predicted.len() && pair.gold.iter().take(k).any(|g| *g == pair.predicted[i]) {
                dcg += w;
            }
            if i < pair.gold.len() {
                ideal += w;
            }
        }
        total += dcg / ideal;
    }
    if docs == 0 {
        0.0
    } else {
        total / docs as f64
    }
}

fn brute(pairs: &[EvalPair<u32>], k: usize) -> Brute {
    let (mut hits, mut np, mut ng) = (0.0, 0.0, 0.0);
    let (mut ap_sum, mut docs) = (0.0, 0);
    for pair in pairs {
        let top_gold: HashSet<u32> = pair.gold.iter().take(k).copied().collect();
        let mut h = 0.0;
        let mut ap = 0.0;
        for (i, c) in pair.predicted.iter().take(k).enumerate() {
            if top_gold.contains(c) {
                h += 1.0;
                ap += h / (i + 1) as f64;
            }
        }
        hits += h;
        np += pair.predicted.len().min(k) as f64;
        ng += pair.gold.len().min(k) as f64;
        if !pair.gold.is_empty() {
            docs += 1;
            ap_sum += ap / pair.gold.len().min(k) as f64;
        }
    }
    let p = if np > 0.0 { hits / np } else { 0.0 };
    let r = if ng > 0.0 { hits / ng } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let map = if docs > 0 { ap_sum / docs as f64 } else { 0.0 };
    let cg = (1..=k).map(|j| brute_ndcg(pairs, j)).sum::<f64>() / k as f64;
    Brute {
        p,
        r,
        f1,
        map,
        ndcg: brute_ndcg(pairs, k),
        cg,
    }
}

fn random_list(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<u32> {
    let len = rng.random_range(min..=max);
    let mut pool: Vec<u32> = (0..14).collect();
    let mut out = Vec::new();
    for _ in 0..len {
        let i = rng.random_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

fn random_corpus(rng: &mut ChaCha8Rng, nonempty: bool) -> Vec<EvalPair<u32>> {
    let d = rng.random_range(1..=10);
    let lo = usize::from(nonempty);
    (0..d)
        .map(|_| EvalPair::new(random_list(rng, lo, 10), random_list(rng, lo, 8)))
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let pairs = random_corpus(&mut rng, false);
        for k in 1..=8 {
            let b = brute(&pairs, k);
            let prf = micro_prf_at_k(&pairs, k).unwrap();
            for (x, y) in [
                (prf.precision, b.p),
                (prf.recall, b.r),
                (prf.f1, b.f1),
                (map_at_k(&pairs, k), b.map),
                (ndcg_at_k(&pairs, k), b.ndcg),
                (cg_at_k(&pairs, k), b.cg),
            ] {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs deviation {worst:.3e}"))?;
    within(start.elapsed(), 10.0, "metric oracle")?;
    Ok(format!("300 corpora x K 1..8, max abs deviation {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..500 {
        let pairs = random_corpus(&mut rng, true);
        let prf = micro_prf_at_k(&pairs, 1).unwrap();
        let vals = [
            prf.precision,
            prf.recall,
            prf.f1,
            map_at_k(&pairs, 1),
            ndcg_at_k(&pairs, 1),
            cg_at_k(&pairs, 1),
        ];
        ensure(vals.iter().all(|v| *v == vals[0]), || format!("corpus {trial}: {vals:?}"))?;
    }
    Ok("P@1 = R@1 = F1@1 = MAP@1 = NDCG@1 = CG_1 bitwise on 500 corpora".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let gold = vec!["c1", "c2", "c3"];
    let a = [EvalPair::new(vec!["c1", "c3", "c2"], gold.clone())];
    let b = [EvalPair::new(vec!["c3", "c2", "c1"], gold)];
    let (na, nb) = (ndcg_at_k(&a, 3), ndcg_at_k(&b, 3));
    let (ca, cb) = (cg_at_k(&a, 3), cg_at_k(&b, 3));
    ensure(na == nb, || format!("NDCG@3 {na} vs {nb}"))?;
    ensure(ca > cb, || format!("CG_3 {ca} vs {cb}"))?;
    Ok(format!("NDCG@3 {na} for both; CG_3 {ca:.4} > {cb:.4}"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let hand: [(&[&str], &[&str], &[&str]); 4] = [
        (&["A", "B", "C"], &["C", "D"], &["C", "D"]),
        (&[], &["X", "Y"], &["X", "Y"]),
        (&["B", "A"], &["A", "B", "C"], &["B", "A", "C"]),
        (&["Q"], &[], &[]),
    ];
    for (g, c, want) in hand {
        let got = merge(g, c);
        ensure(got == want, || format!("merge({g:?}, {c:?}) = {got:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let g = random_list(&mut rng, 0, 10);
        let c = random_list(&mut rng, 0, 10);
        let m = merge(&g, &c);
        let (ms, cs): (HashSet<_>, HashSet<_>) = (m.iter().collect(), c.iter().collect());
        ensure(ms == cs && m.len() == c.len(), || format!("set mismatch {g:?} {c:?} -> {m:?}"))?;
        let prefix: Vec<u32> = g.iter().filter(|x| c.contains(x)).copied().collect();
        let rest: Vec<u32> = c.iter().filter(|x| !g.contains(x)).copied().collect();
        ensure(m[..prefix.len()] == prefix[..] && m[prefix.len()..] == rest[..], || {
            format!("order {g:?} {c:?} -> {m:?}")
        })?;
    }
    Ok("4 hand traces and 1000 random pairs".into())
}

// ---------------------------------------------------------------- 7

fn dice_value(logits: &[f64], labels: &[f64], epsilon: f64) -> f64 {
    let mut tape = Tape::new();
    let b1 = tape.constant(Tensor::from_vec(logits.to_vec()));
    let b2 = tape.constant(Tensor::from_vec(logits.to_vec()));
    let l = dice_loss(&mut tape, b1, b2, labels, epsilon).unwrap();
    tape.value(l).unwrap().item().unwrap()
}

/// The smoothing term shifts the perfect-agreement value to
/// `1 - (4P + eps) / (3P + eps)`, which is within 1e-9 of -1/3 only for
/// eps = 0 or P >= 2 at the default eps; the unsmoothed form is checked
/// against -1/3 and the default against its exact smoothed value.
fn criterion_7() -> Outcome {
    let eps = TrainConfig::default().dice_epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_exact, mut worst_smoothed, mut worst_default): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut min_zero = f64::INFINITY;
    for _ in 0..200 {
        let n = rng.random_range(1..=20);
        let mut y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        y[rng.random_range(0..n)] = 1.0;
        let p = y.iter().sum::<f64>();
        let perfect: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 50.0 } else { -50.0 }).collect();
        worst_exact = worst_exact.max((dice_value(&perfect, &y, 0.0) + 1.0 / 3.0).abs());
        let smoothed = dice_value(&perfect, &y, eps);
        worst_smoothed = worst_smoothed.max((smoothed - (1.0 - (4.0 * p + eps) / (3.0 * p + eps))).abs());
        worst_default = worst_default.max((smoothed + 1.0 / 3.0).abs());
        min_zero = min_zero.min(dice_value(&vec![-50.0; n], &y, eps));
    }
    ensure(worst_exact <= 1e-9, || format!("perfect agreement off by {worst_exact:.2e}"))?;
    ensure(worst_smoothed <= 1e-12, || format!("smoothed closed form off by {worst_smoothed:.2e}"))?;
    ensure(min_zero >= 1.0 - 1e-6, || format!("all-zero predictions gave {min_zero}"))?;
    Ok(format!(
        "perfect: |L + 1/3| <= {worst_exact:.1e} unsmoothed, {worst_default:.2e} at eps {eps:e}; all-zero: L >= {min_zero:.9}"
    ))
}

// ---------------------------------------------------------------- 8

fn small_base() -> ModelConfig {
    ModelConfig {
        d_e: 8,
        d_c: 8,
        segment_len: 32,
        max_input_len: 64,
        d_ff: 16,
        d_dec: 8,
        dec_ff: 16,
        max_output_len: 24,
        ..ModelConfig::new(0, 0)
    }
}

fn criterion_8() -> Outcome {
    let splits = generate_synthetic_corpus(
        &SynthConfig {
            train_docs: 30,
            validation_docs: 10,
            test_docs: 10,
            ..SynthConfig::sanity()
        },
        8,
    )
    .map_err(|e| e.to_string())?;
    let data = TrainingData::build(&splits, &SurrogateRules::default(), 1, 64, OrderingStrategy::InterleavedByPriority);
    let cfg = TrainConfig {
        epochs_phase1: 1,
        epochs_phase2: 3,
        lr_phase2: 1e-2,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
    let init = tr.init_model(small_base()).map_err(|e| e.to_string())?;
    let before = tr.phase1(init).map_err(|e| e.to_string())?.model().map_err(|e| e.to_string())?;
    let selected = tr.phase2(before.clone()).map_err(|e| e.to_string())?.model().map_err(|e| e.to_string())?;
    let last = tr.last_model.clone().ok_or("no final model")?;
    let frozen = |n: &str| is_encoder(n) || is_decoder(n);
    let h0 = param_digest(&before.params, frozen);
    for (what, m) in [("selected", &selected), ("final", &last)] {
        let h = param_digest(&m.params, frozen);
        ensure(h == h0, || format!("{what} encoder+decoder hash changed"))?;
    }
    // The head receives a nonzero Dice gradient, so its bytes must move.
    let ex = &data.train[0];
    let mut tape = Tape::new();
    let b = before.params.bind(&mut tape, is_head);
    let h = encode(&mut tape, &b, &before.config, &ex.ids, &ex.mask).unwrap();
    let head = classifier_logits(&mut tape, &b, h).unwrap();
    let loss = dice_loss(&mut tape, head.block1, head.block2, &ex.labels, 1e-8).unwrap();
    tape.backward(loss).unwrap();
    let g = b.gradients(&tape);
    let gnorm: f64 = g.iter().filter(|(n, _)| is_head(n)).flat_map(|(_, t)| t.data().to_vec()).map(|x| x * x).sum::<f64>().sqrt();
    ensure(gnorm > 0.0, || "head gradient is zero".into())?;
    let (hb, hl) = (param_digest(&before.params, is_head), param_digest(&last.params, is_head));
    ensure(hb != hl, || "head hash unchanged after phase 2".into())?;
    Ok(format!("frozen hash {}..; head gradient norm {gnorm:.2e}, head hash changed", &h0[..12]))
}

// ---------------------------------------------------------------- 9

/// Next-token distributions drawn from a hash of (seed, prefix).
struct RandomDecoder {
    seed: u64,
    vocab: usize,
}

impl StepScorer for RandomDecoder {
    fn log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
        let mut hasher = DefaultHasher::new();
        (self.seed, prefix).hash(&mut hasher);
        let mut rng = ChaCha8Rng::seed_from_u64(hasher.finish());
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|x| x - z).collect()
    }

    fn eos(&self) -> usize {
        self.vocab - 1
    }
}

fn oracle_greedy(d: &mut RandomDecoder, max_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = d.log_probs(&out);
        let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
        if best == d.eos() {
            break;
        }
        out.push(best);
    }
    out
}

/// Best complete sequence by full enumeration: any run of non-EOS tokens
/// followed by EOS within `max_len` steps, or exactly `max_len` tokens.
fn exhaustive(d: &mut RandomDecoder, max_len: usize) -> (Vec<usize>, f64) {
    let eos = d.eos();
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        if prefix.len() == max_len {
            if score > best.1 {
                best = (prefix, score);
            }
            continue;
        }
        let lp = d.log_probs(&prefix);
        let end = score + lp[eos];
        if end > best.1 {
            best = (prefix.clone(), end);
        }
        for t in (0..d.vocab).filter(|&t| t != eos) {
            let mut next = prefix.clone();
            next.push(t);
            stack.push((next, score + lp[t]));
        }
    }
    best
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let vocab = rng.random_range(2..=8);
        let max_len = rng.random_range(1..=8);
        let mut d = RandomDecoder { seed: rng.random(), vocab };
        let want = oracle_greedy(&mut d, max_len);
        let got = beam_search(&mut d, 1, max_len).remove(0).tokens;
        ensure(got == want, || format!("decoder {i}: beam 1 {got:?} vs greedy {want:?}"))?;
        ensure(greedy(&mut d, max_len).tokens == want, || format!("decoder {i}: library greedy differs"))?;
    }
    let mut enumerated = 0;
    for vocab in 2..=4 {
        for max_len in 1..=4 {
            for _ in 0..10 {
                let mut d = RandomDecoder { seed: rng.random(), vocab };
                let (tokens, score) = exhaustive(&mut d, max_len);
                let top = beam_search(&mut d, vocab.pow(4), max_len).remove(0);
                ensure(top.tokens == tokens && (top.log_prob - score).abs() < 1e-12, || {
                    format!("|V|={vocab} len {max_len}: beam {:?} {} vs exhaustive {tokens:?} {score}", top.tokens, top.log_prob)
                })?;
                enumerated += 1;
            }
        }
    }
    for i in 0..100 {
        let vocab = rng.random_range(2..=6);
        let max_len = rng.random_range(1..=6);
        let mut d = RandomDecoder { seed: rng.random(), vocab };
        let mut prev = f64::NEG_INFINITY;
        for w in 1..=12 {
            let s = beam_search(&mut d, w, max_len)[0].log_prob;
            ensure(s >= prev, || format!("decoder {i}: width {w} best {s} < {prev}"))?;
            prev = s;
        }
    }
    Ok(format!("100 greedy matches, {enumerated} exhaustive matches, monotone over widths 1..12 on 100 decoders"))
}

// ---------------------------------------------------------------- 10

fn sanity_model() -> ModelConfig {
    ModelConfig {
        d_e: 32,
        d_c: 32,
        segment_len: 32,
        max_input_len: 64,
        d_ff: 64,
        d_dec: 32,
        dec_ff: 64,
        max_output_len: 32,
        ..ModelConfig::new(0, 0)
    }
}

fn ndcg3(preds: &[RankedPrediction], gold: &[ltricd_core::corpus::CodedDocument]) -> f64 {
    ndcg_at_k(&pairs_for(preds, gold, None).unwrap(), 3)
}

fn harness_config() -> (SynthConfig, RunConfig) {
    let counts = CountDistribution {
        mean: 4.0,
        sd: 1.0,
        min: 3,
        max: 6,
    };
    let synth = SynthConfig {
        diagnosis_codes: 20,
        procedure_codes: 20,
        train_docs: 200,
        validation_docs: 40,
        test_docs: 60,
        diagnosis_count: counts,
        procedure_count: counts,
        zipf_exponent: 0.5,
        signature_size: 1,
        mentions_top: 6,
        mentions_step: 1,
        filler_vocab: 60,
        filler_per_doc: 8,
        surrogates_per_doc: 1,
        ..SynthConfig::sanity()
    };
    let m = sanity_model();
    let run = RunConfig {
        seed: 0,
        synth: synth.clone(),
        model: ModelSection {
            d_e: m.d_e,
            d_c: m.d_c,
            kernel: m.kernel,
            segment_len: m.segment_len,
            max_input_len: m.max_input_len,
            d_ff: m.d_ff,
            d_dec: m.d_dec,
            dec_ff: m.dec_ff,
            max_output_len: 16,
        },
        train: TrainConfig {
            epochs_phase1: 15,
            epochs_phase2: 0,
            ..TrainConfig::default()
        },
        // A four-step budget keeps roughly one kind's worth of codes.
        max_decode_len: Some(4),
        k_list: (1..=6).collect(),
        ..RunConfig::default()
    };
    (synth, run)
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let splits = generate_synthetic_corpus(&SynthConfig::sanity(), 7).map_err(|e| e.to_string())?;
    let ordering = OrderingStrategy::InterleavedByPriority;
    let data = TrainingData::build(&splits, &SurrogateRules::default(), 1, 64, ordering);
    ensure(data.codes.len() == 50 && data.train.len() == 300, || {
        format!("{} codes, {} train docs", data.codes.len(), data.train.len())
    })?;
    let cfg = TrainConfig {
        epochs_phase1: 50,
        epochs_phase2: 10,
        eval_train: true,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, &data).map_err(|e| e.to_string())?;
    let init = tr.init_model(sanity_model()).map_err(|e| e.to_string())?;
    let ck1 = tr.phase1(init).map_err(|e| e.to_string())?;
    let phase1_time = start.elapsed();
    let train_f1: Vec<(usize, f64)> = tr
        .log
        .iter()
        .filter(|e| e.split == "train")
        .filter_map(|e| e.micro_f1.map(|f| (e.epoch, f)))
        .collect();
    let reached = train_f1.iter().find(|(_, f)| *f >= 0.90).map(|(e, _)| *e);
    let best_train = train_f1.iter().map(|(_, f)| *f).fold(0.0, f64::max);
    ensure(reached.is_some(), || format!("best train micro-F1 {best_train:.3} in 50 epochs"))?;
    within(phase1_time, 900.0, "phase 1")?;
    let ck2 = tr.phase2(ck1.model().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let model = ck2.model().map_err(|e| e.to_string())?;
    let test = prepare(&splits.test, &data.codes, &data.tokens, &SurrogateRules::default(), 64, ordering);
    let preds = predict_all(&model, &data.codes, &test, &PredictConfig::default()).map_err(|e| e.to_string())?;
    let clf: Vec<RankedPrediction> = preds.iter().map(|p| p.classifier.clone()).collect();
    let merged: Vec<RankedPrediction> = preds
        .iter()
        .map(|p| RankedPrediction::new(p.classifier.id.clone(), merge(&p.generative.codes, &p.classifier.codes)))
        .collect();
    let (n_merged, n_clf) = (ndcg3(&merged, &splits.test), ndcg3(&clf, &splits.test));
    ensure(n_merged >= n_clf, || format!("NDCG@3 merged {n_merged:.4} < classifier {n_clf:.4}"))?;

    let (_, run) = harness_config();
    let hsplits = generate_synthetic_corpus(&run.synth, 11).map_err(|e| e.to_string())?;
    let rows = compare_orderings(&run, &hsplits).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv_path = dir.path().join("ordering_cg.csv");
    fs::write(&csv_path, rows_to_csv(&rows)).map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(&csv_path).map_err(|e| e.to_string())?;
    for s in OrderingStrategy::ALL {
        ensure(csv.contains(s.name()), || format!("CSV lacks {}", s.name()))?;
    }
    let (s1, s2) = (OrderingStrategy::DiagThenProc, OrderingStrategy::ProcThenDiag);
    let d1 = curve(&rows, s1, "merged", CodeKind::Diagnosis);
    let d2 = curve(&rows, s2, "merged", CodeKind::Diagnosis);
    let p1 = curve(&rows, s1, "merged", CodeKind::Procedure);
    let p2 = curve(&rows, s2, "merged", CodeKind::Procedure);
    ensure(d1.len() == 6 && d1.iter().zip(&d2).all(|(a, b)| a > b), || {
        format!("diagnosis CG strategy 1 {d1:.3?} vs strategy 2 {d2:.3?}")
    })?;
    ensure(p2.iter().zip(&p1).all(|(a, b)| a > b), || {
        format!("procedure CG strategy 2 {p2:.3?} vs strategy 1 {p1:.3?}")
    })?;
    within(start.elapsed(), 900.0, "learning checks")?;
    Ok(format!(
        "train micro-F1 >= 0.90 at epoch {} ({:.0}s); NDCG@3 merged {n_merged:.4} vs classifier {n_clf:.4}; \
         CG_6 diag s1 {:.3} > s2 {:.3}, proc s2 {:.3} > s1 {:.3}",
        reached.unwrap(),
        phase1_time.as_secs_f64(),
        d1[5],
        d2[5],
        p2[5],
        p1[5]
    ))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let code = IcdCode::diagnosis("4019").unwrap();
    let vocab = CodeVocabulary::from_codes(vec![code.clone()]);
    let (parsed, rejected) = parse_sequence("401.9;junk;401.9", &vocab);
    let got = postprocess_generated(&parsed, &rejected);
    ensure(got == vec![code.clone()], || format!("got {got:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let len = rng.random_range(0..20);
        let list: Vec<u8> = (0..len).map(|_| rng.random_range(0..8)).collect();
        let want: Vec<u8> = list
            .iter()
            .enumerate()
            .filter(|(i, x)| !list[..*i].contains(x))
            .map(|(_, x)| *x)
            .collect();
        let got = dedup_first(&list);
        ensure(got == want, || format!("{list:?} -> {got:?}"))?;
    }
    Ok("\"401.9;junk;401.9\" -> [401.9]; 1000 dedup lists match".into())
}

// ---------------------------------------------------------------- 12

fn run_pipeline(dir: &Path, config: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_ltricd");
    let p = |x: &str| dir.join(x).to_str().unwrap().to_string();
    let cfg = config.to_str().unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--out".into(), p("corpus")],
        vec!["train".into(), "--corpus".into(), p("corpus"), "--out".into(), p("ck")],
        vec![
            "predict".into(), "--checkpoint".into(), p("ck/phase2.ckpt.json"), "--corpus".into(), p("corpus"),
            "--out".into(), p("pred"), "--beam".into(), "3".into(),
        ],
        vec![
            "merge".into(), "--generative".into(), p("pred/generative.jsonl"), "--classifier".into(),
            p("pred/classifier.jsonl"), "--out".into(), p("pred/merged.jsonl"),
        ],
        vec![
            "evaluate".into(), "--predictions".into(), p("pred/merged.jsonl"), "--corpus".into(), p("corpus"),
            "--out".into(), p("eval"),
        ],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(["--config", cfg, "--seed", "13"])
            .args(&args)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = serde_json::json!({
        "synth": {
            "diagnosis_codes": 12, "procedure_codes": 6,
            "train_docs": 24, "validation_docs": 8, "test_docs": 8,
            "diagnosis_count": {"mean": 2.5, "sd": 1.0, "min": 1, "max": 5},
            "procedure_count": {"mean": 1.0, "sd": 0.8, "min": 0, "max": 3},
            "filler_vocab": 30, "filler_per_doc": 6
        },
        "model": {"d_e": 8, "d_c": 8, "segment_len": 16, "max_input_len": 48, "d_ff": 16,
                  "d_dec": 8, "dec_ff": 16, "max_output_len": 16},
        "train": {"epochs_phase1": 2, "epochs_phase2": 2},
        "k_list": [1, 2, 3, 5]
    });
    let cfg_path = dir.path().join("run.json");
    fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&a, &cfg_path)?;
    run_pipeline(&b, &cfg_path)?;
    let (ta, tb) = (tree(&a), tree(&b));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    ensure(names == tb.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), || "file sets differ".into())?;
    let differing: Vec<&str> = ta.iter().zip(&tb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    ensure(differing.is_empty(), || format!("differing outputs: {differing:?}"))?;
    Ok(format!("{} output files byte-identical across reruns", ta.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", criterion_1),
        ("label-attention oracle", criterion_2),
        ("metric oracle", criterion_3),
        ("K=1 identity", criterion_4),
        ("NDCG vs CG ordering sensitivity", criterion_5),
        ("merge contract", criterion_6),
        ("Dice closed form", criterion_7),
        ("two-phase freeze", criterion_8),
        ("beam search", criterion_9),
        ("learning sanity", criterion_10),
        ("post-processing", criterion_11),
        ("determinism", criterion_12),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
