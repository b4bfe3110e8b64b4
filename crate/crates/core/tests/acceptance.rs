//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nnoc::codec::{self, ideal_codelength, Bitstream, TraceEntry};
use nnoc::context::{collect_from_clouds, ContextHistogram, ContextVector, Counts};
use nnoc::entropy::{Decoder, Encoder, QuantizedDist, PROB_TOTAL};
use nnoc::model::{self, train, Network, OutputArch, TrainConfig};
use nnoc::synth::{random_fill, random_scene, structured_scene};
use nnoc::{Model, Variant, VoxelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Models trained once on the structured family and shared by several
/// criteria.
struct Trained {
    nnoc: Model,
    fnnoc: Model,
    small: HashMap<Variant, Model>,
}

const FAMILY_DEPTH: u8 = 6;

fn family_train_set() -> Vec<VoxelSet> {
    (0..5).map(|s| structured_scene(FAMILY_DEPTH, s)).collect()
}

fn family_val_set() -> Vec<VoxelSet> {
    vec![structured_scene(FAMILY_DEPTH, 100)]
}

fn family_test_set() -> Vec<VoxelSet> {
    (200..203).map(|s| structured_scene(FAMILY_DEPTH, s)).collect()
}

fn train_on_family(variant: Variant) -> Model {
    let train_set = family_train_set();
    let hist = collect_from_clouds(&train_set, variant.template());
    let val = collect_from_clouds(&family_val_set(), variant.template());
    let cfg = TrainConfig {
        batch_size: 256,
        max_epochs: 40,
        seed: 7,
        ..TrainConfig::default()
    };
    train(&hist, &val, variant, &cfg).expect("training succeeds").model
}

fn train_small(variant: Variant) -> Model {
    let scenes = vec![structured_scene(5, 11), structured_scene(5, 12)];
    let hist = collect_from_clouds(&scenes, variant.template());
    let empty = ContextHistogram::new(variant.template());
    let cfg = TrainConfig {
        batch_size: 128,
        max_epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    train(&hist, &empty, variant, &cfg).expect("training succeeds").model
}

/// Scene `i` of the round-trip corpus: depth cycles over 2..=8, the voxel
/// count is log-uniform from 1 to the cap, and every fifth shallow scene
/// is a dense fill.
fn corpus_scene(i: u64) -> VoxelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0000 + i);
    let depth = 2 + (i % 7) as u8;
    if depth <= 5 && i.is_multiple_of(5) {
        let density = [0.5, 0.25, 0.1][(i / 5 % 3) as usize];
        let vs = random_fill(depth, density, i);
        if !vs.is_empty() {
            return vs;
        }
    }
    if depth >= 5 && i % 4 == 1 {
        return structured_scene(depth, i);
    }
    let side = 1u64 << depth;
    let cap = (side * side * side / 2).min(1500) as f64;
    let count = cap.powf(rng.gen::<f64>()).round().max(1.0) as usize;
    random_scene(depth, count, i)
}

fn criterion_1(trained: &Trained) -> Outcome {
    let start = Instant::now();
    let scenes = 1050u64;
    let mut failures = Vec::new();
    let mut per_variant = [0usize; 7];
    let mut voxels = 0usize;
    let random_models: HashMap<Variant, Model> =
        Variant::ALL.iter().map(|&v| (v, Model::init(v, 1234))).collect();
    let uniform_models: HashMap<Variant, Model> =
        Variant::ALL.iter().map(|&v| (v, Model::uniform(v))).collect();
    for i in 0..scenes {
        let vs = corpus_scene(i);
        let v = Variant::ALL[((i / 7 + i) % 7) as usize];
        let model = match (i / 49) % 3 {
            0 => &uniform_models[&v],
            1 => &random_models[&v],
            _ => &trained.small[&v],
        };
        per_variant[v.id() as usize] += 1;
        voxels += vs.len();
        let ok = codec::encode(&vs, model, v)
            .map(|bs| bs.to_bytes())
            .and_then(|bytes| Bitstream::from_bytes(&bytes))
            .and_then(|bs| codec::decode(&bs, model))
            .map(|out| out == vs)
            .unwrap_or(false);
        if !ok {
            failures.push(i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 600.0,
        format!(
            "{scenes} scenes ({voxels} voxels, depths 2-8, per variant {per_variant:?}, \
             uniform/random/trained models), failures {failures:?}, {secs:.1}s"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let mut symbols = Vec::with_capacity(n);
    for _ in 0..n {
        let c1 = rng.gen_range(1..PROB_TOTAL);
        let dist = QuantizedDist::from_c1(c1).unwrap();
        // Draw the bit from the distribution half the time, uniformly otherwise.
        let bit = if rng.gen_bool(0.5) {
            rng.gen_range(0..PROB_TOTAL) < c1
        } else {
            rng.gen_bool(0.5)
        };
        symbols.push((bit, dist));
    }
    let mut enc = Encoder::new();
    let mut ideal = 0.0;
    for &(bit, dist) in &symbols {
        enc.encode(bit, dist);
        ideal += dist.cost(bit);
    }
    let bytes = enc.finish();
    let mut dec = Decoder::new(&bytes).unwrap();
    let mismatches = symbols
        .iter()
        .filter(|&&(bit, dist)| dec.decode(dist).map(|b| b != bit).unwrap_or(true))
        .count();
    let actual = 8.0 * bytes.len() as f64;
    outcome(
        mismatches == 0 && actual <= ideal + 64.0,
        format!(
            "{n} symbols, mismatches {mismatches}, payload {actual} bits vs ideal {ideal:.1} (slack {:.1})",
            actual - ideal
        ),
    )
}

/// Signs of every hidden pre-activation over the batch.
fn relu_pattern(net: &Network<f64>, batch: &[(ContextVector, Counts)]) -> Vec<bool> {
    let mut pattern = Vec::new();
    for (ctx, _) in batch {
        let mut x: Vec<f64> = ctx.to_bools().iter().map(|&b| b as u8 as f64).collect();
        for layer in &net.layers[..net.layers.len() - 1] {
            x = layer
                .weights
                .chunks_exact(layer.inputs)
                .zip(&layer.bias)
                .map(|(row, b)| b + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
                .collect();
            pattern.extend(x.iter().map(|&v| v > 0.0));
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    pattern
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 120;
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    for inst in 0..instances {
        let n_c = model::SUPPORTED_CONTEXT_LENGTHS[inst % 4];
        let arch = if inst % 3 == 0 { OutputArch::Sigmoid1 } else { OutputArch::Softmax2 };
        let hidden = 1 + (inst % 5 == 4) as usize;
        let mut net: Network<f64> = Network::init(n_c, arch, hidden, rng.gen()).unwrap();
        for p in net.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
            *p = rng.gen_range(-0.2..0.2);
        }
        let batch: Vec<(ContextVector, Counts)> = (0..rng.gen_range(1..12))
            .map(|_| {
                let bits: u128 = rng.gen::<u128>() & rng.gen::<u128>();
                let counts = Counts {
                    zeros: rng.gen_range(0..6),
                    ones: rng.gen_range(0..6),
                };
                (ContextVector::new(bits, n_c), counts)
            })
            .collect();
        let (_, grad) = net.grad(&batch).unwrap();
        let analytic: Vec<f64> = grad.params().copied().collect();
        let n_params = analytic.len();
        let base = relu_pattern(&net, &batch);
        let mut done = 0;
        while done < 25 {
            let k = rng.gen_range(0..n_params);
            let probe = |delta: f64| {
                let mut p = net.clone();
                *p.params_mut().nth(k).unwrap() += delta;
                p
            };
            // The loss is not differentiable where a probe flips a ReLU.
            if [-2.0 * h, 2.0 * h].iter().any(|&d| relu_pattern(&probe(d), &batch) != base) {
                kinks += 1;
                continue;
            }
            done += 1;
            let eval = |delta: f64| probe(delta).batch_loss(&batch).unwrap();
            // Fourth-order central difference.
            let fd = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            let a = analytic[k];
            let scale = a.abs().max(fd.abs());
            // Both sides vanish for parameters the batch does not reach.
            let rel = if scale < 1e-7 { (a - fd).abs() } else { (a - fd).abs() / scale };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(
        worst < 1e-4,
        format!(
            "{instances} instances, {checked} coordinates ({kinks} resampled at ReLU kinks), \
             worst relative error {worst:.2e}"
        ),
    )
}

fn criterion_4(trained: &Trained) -> Outcome {
    let cloud = structured_scene(FAMILY_DEPTH, 300);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for model in [&trained.nnoc, &trained.fnnoc] {
        let (bs, trace) = codec::encode_traced(&cloud, model, model.variant()).unwrap();
        for level in &bs.levels {
            let decisions: Vec<&TraceEntry> = trace.iter().filter(|t| t.r == level.r).collect();
            // Loss of the level's own context histogram, each context at its
            // quantized coding probability.
            let mut hist: HashMap<ContextVector, (Counts, QuantizedDist)> = HashMap::new();
            for t in &decisions {
                let e = hist.entry(t.context).or_insert((Counts::default(), t.dist));
                e.0.add(t.bit);
            }
            let (p1, counts): (Vec<f64>, Vec<Counts>) = hist
                .values()
                .map(|(c, d)| (d.c1() as f64 / PROB_TOTAL as f64, *c))
                .unzip();
            let loss = model::loss(&p1, &counts).unwrap();
            let ideal = ideal_codelength(decisions.iter().copied());
            assert!((loss - ideal).abs() < 1e-6 * (1.0 + ideal));
            let actual = 8.0 * level.payload.len() as f64;
            worst = worst.max((actual - loss).abs());
            lines.push(format!("r{}:{actual}/{loss:.1}", level.r));
        }
    }
    outcome(
        worst <= 64.0,
        format!("payload/loss bits per level {} ; worst gap {worst:.1} bits", lines.join(" ")),
    )
}

fn bits_per_decision(model: &Model, scenes: &[VoxelSet]) -> f64 {
    let mut bits = 0.0;
    let mut n = 0;
    for vs in scenes {
        let (_, trace) = codec::encode_traced(vs, model, model.variant()).unwrap();
        bits += ideal_codelength(&trace);
        n += trace.len();
    }
    bits / n as f64
}

fn mean_bpov(model: &Model, scenes: &[VoxelSet]) -> f64 {
    scenes
        .iter()
        .map(|vs| {
            let bs = codec::encode(vs, model, model.variant()).unwrap();
            assert_eq!(&codec::decode(&bs, model).unwrap(), vs);
            codec::bpov(&bs, vs).unwrap().total
        })
        .sum::<f64>()
        / scenes.len() as f64
}

fn criterion_5(trained: &Trained) -> Outcome {
    let test = family_test_set();
    let ours = bits_per_decision(&trained.nnoc, &test);
    let uniform = bits_per_decision(&Model::uniform(Variant::Nnoc), &test);
    outcome(
        ours < 0.8 && (uniform - 1.0).abs() < 1e-9,
        format!("held-out family scenes: trained {ours:.4} vs uniform {uniform:.4} bits per decision"),
    )
}

fn criterion_6(trained: &Trained) -> Outcome {
    let lens: Vec<usize> = [Variant::Fnnoc, Variant::Fnnoc1, Variant::Fnnoc2, Variant::Fnnoc3]
        .iter()
        .map(|v| Model::uniform(*v).network().context_len())
        .collect();
    let test = family_test_set();
    let nnoc = mean_bpov(&trained.nnoc, &test);
    let fnnoc = mean_bpov(&trained.fnnoc, &test);
    outcome(
        lens == [100, 75, 50, 36] && nnoc <= fnnoc,
        format!("context lengths {lens:?}; held-out bpov NNOC {nnoc:.4} <= fNNOC {fnnoc:.4}"),
    )
}

fn criterion_7() -> Outcome {
    let n = model::init_model(100, OutputArch::Softmax2, 0).unwrap().param_count();
    let m = Model::init(Variant::Nnoc, 0).param_count();
    outcome(n == 20602 && m == 20602, format!("{n} trainable parameters at n_C = 100"))
}

fn criterion_8() -> Outcome {
    let mut scenes = 0;
    let mut decisions = 0;
    let mut mismatches = 0;
    for i in 0..60u64 {
        let v = Variant::ALL[1 + (i % 6) as usize];
        let depth = 3 + (i % 4) as u8;
        let vs = if i % 2 == 0 {
            random_scene(depth, 1 + (i as usize * 37) % 400, i)
        } else {
            structured_scene(depth.max(4), i)
        };
        let model = Model::init(v, 500 + i);
        let (bs, enc) = codec::encode_traced(&vs, &model, v).unwrap();
        let (out, dec) = codec::decode_traced(&bs, &model).unwrap();
        scenes += 1;
        decisions += enc.len();
        let same = out == vs
            && enc.len() == dec.len()
            && enc.iter().zip(&dec).all(|(a, b)| {
                a.pos == b.pos
                    && a.context == b.context
                    && a.p1.to_bits() == b.p1.to_bits()
                    && a.dist == b.dist
            });
        if !same {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{scenes} scenes, {decisions} decisions across fNNOC variants, {mismatches} trace mismatches"),
    )
}

fn criterion_9() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_nnoc");
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    nnoc::write_ply(&structured_scene(5, 9), p("a.ply")).unwrap();
    nnoc::write_ply(&structured_scene(5, 10), p("b.ply")).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(exe).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["collect", &p("h.hist"), &p("a.ply"), &p("b.ply"), "--variant", "fnnoc3"]);
    for model in ["m1.model", "m2.model"] {
        run(&["train", &p("h.hist"), &p(model), "--seed", "42", "--max-epochs", "4", "--batch-size", "64"]);
    }
    for out in ["s1.bin", "s2.bin"] {
        run(&["encode", &p("a.ply"), &p(out), "--model", &p("m1.model")]);
    }
    let read = |name: &str| std::fs::read(p(name)).unwrap();
    let models_equal = read("m1.model") == read("m2.model");
    let streams_equal = read("s1.bin") == read("s2.bin");
    outcome(
        models_equal && streams_equal,
        format!(
            "train twice (seed 42): identical model files {models_equal}; \
             encode twice: identical bitstreams {streams_equal}"
        ),
    )
}

/// Runs every criterion, or only those whose numbers are given as
/// arguments (`cargo test --test acceptance -- 3 8`).
fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let trained = OnceLock::new();
    let trained = || {
        trained.get_or_init(|| {
            let start = Instant::now();
            let t = Trained {
                nnoc: train_on_family(Variant::Nnoc),
                fnnoc: train_on_family(Variant::Fnnoc),
                small: Variant::ALL.iter().map(|&v| (v, train_small(v))).collect(),
            };
            println!("trained shared models in {:.1}s", start.elapsed().as_secs_f64());
            t
        })
    };

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("lossless round-trip", Box::new(|| criterion_1(trained()))),
        ("arithmetic coder oracle", Box::new(criterion_2)),
        ("gradient vs finite differences", Box::new(criterion_3)),
        ("codelength identity", Box::new(|| criterion_4(trained()))),
        ("learning effectiveness", Box::new(|| criterion_5(trained()))),
        ("ablation wiring", Box::new(|| criterion_6(trained()))),
        ("parameter count", Box::new(criterion_7)),
        ("fNNOC batch equality", Box::new(criterion_8)),
        ("determinism", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        println!(
            "criterion {} [{name}]: {} - {} ({:.1}s)",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            t.elapsed().as_secs_f64()
        );
        failed += !result.pass as usize;
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
