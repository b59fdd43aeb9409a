//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refset_vpr::augmentation::{AugmentSelection, AugmentationSpec};
use refset_vpr::dataset::{Dataset, ImageRecord, Pose};
use refset_vpr::embedding::{EmbeddingModel, Fingerprint, Layer, ParamGradients};
use refset_vpr::evaluation::generalization_matrix;
use refset_vpr::image::RgbImage;
use refset_vpr::protocol::{run_domain_gap, DomainGapProtocol, DomainGapRun, Worlds};
use refset_vpr::retrieval::{build_map, knn_slice, DescriptorMap};
use refset_vpr::rsf::{
    build_finetune_stream, mine_hard_negatives, rsf_finetune, triplet_loss, QueryInfo, TrainConfig,
};
use refset_vpr::VprError;

/// Frozen Recall@1 values (percent) of the first full run with the default
/// protocol; later runs must stay within `PIN_TOLERANCE`.
const PINNED_BASELINE_B: f64 = 58.9;
const PINNED_FINETUNED_B: f64 = 72.6;
const PIN_TOLERANCE: f64 = 1.0;
const MIN_GAIN: f64 = 3.0;
const MAX_GENERALIZATION_LOSS: f64 = 2.0;
const POSELESS_TIE: f64 = 0.5;

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

// ---------------------------------------------------------------------------
// independent oracles

fn oracle_forward(layers: &[Layer], raw: &[f64]) -> Vec<f64> {
    let mut x = raw.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        let mut z = layer.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += xi * layer.weights[i * layer.output_dim + j];
            }
        }
        if k + 1 < layers.len() {
            z = z.into_iter().map(f64::tanh).collect();
        }
        x = z;
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.into_iter().map(|v| v / norm).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn oracle_triplet(q: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (dist(q, p) - dist(q, n) + margin).max(0.0)
}

fn random_model(rng: &mut ChaCha8Rng) -> EmbeddingModel {
    let input = rng.random_range(3..9);
    let depth = rng.random_range(0..3);
    let mut dims = vec![input];
    for _ in 0..depth {
        dims.push(rng.random_range(2..7));
    }
    dims.push(rng.random_range(2..6));
    let layers = dims
        .windows(2)
        .map(|w| {
            let mut l = Layer::zeros(w[0], w[1]);
            l.weights
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
            l.bias
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
            l
        })
        .collect();
    EmbeddingModel::from_layers(layers).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// criteria

fn c1_gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut configs = 0;
    let mut worst: f64 = 0.0;
    while configs < 120 {
        let model = random_model(&mut rng);
        let d = model.input_dim();
        let (q, p, n) = (
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
        );
        let margin = rng.random_range(0.05..1.0);
        let objective = |layers: &[Layer]| {
            oracle_triplet(
                &oracle_forward(layers, &q),
                &oracle_forward(layers, &p),
                &oracle_forward(layers, &n),
                margin,
            )
        };
        let base = model.layers().to_vec();
        // the hinge must be clearly active
        if objective(&base) <= 0.05 {
            continue;
        }
        configs += 1;

        let fq = model.forward_cached(&q).unwrap();
        let fp = model.forward_cached(&p).unwrap();
        let fn_ = model.forward_cached(&n).unwrap();
        let tl = triplet_loss(fq.output(), fp.output(), fn_.output(), margin).unwrap();
        let mut analytic = ParamGradients::zeros_like(&model);
        model
            .backward_into(&fq, &tl.grad_query, &mut analytic)
            .unwrap();
        model
            .backward_into(&fp, &tl.grad_positive, &mut analytic)
            .unwrap();
        model
            .backward_into(&fn_, &tl.grad_negative, &mut analytic)
            .unwrap();

        let mut a_all = Vec::new();
        let mut n_all = Vec::new();
        for (li, layer) in base.iter().enumerate() {
            for which in 0..2 {
                let len = if which == 0 {
                    layer.weights.len()
                } else {
                    layer.bias.len()
                };
                for idx in 0..len {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    let (pp, mm) = if which == 0 {
                        (&mut plus[li].weights[idx], &mut minus[li].weights[idx])
                    } else {
                        (&mut plus[li].bias[idx], &mut minus[li].bias[idx])
                    };
                    *pp += h;
                    *mm -= h;
                    n_all.push((objective(&plus) - objective(&minus)) / (2.0 * h));
                    let g = &analytic.layers[li];
                    a_all.push(if which == 0 {
                        g.weights[idx]
                    } else {
                        g.bias[idx]
                    });
                }
            }
        }
        let scale = n_all
            .iter()
            .chain(&a_all)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let err = a_all
            .iter()
            .zip(&n_all)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{configs} configs, max relative error {worst:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_triplet_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let (mut active, mut inactive) = (0, 0);
    for _ in 0..1000 {
        let d = rng.random_range(1..17);
        let (q, p, n) = (
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
            random_vec(&mut rng, d),
        );
        let margin = rng.random_range(0.01..1.0);
        let got = triplet_loss(&q, &p, &n, margin).unwrap().loss;
        let want = oracle_triplet(&q, &p, &n, margin);
        if want > 0.0 {
            active += 1;
        } else {
            inactive += 1;
        }
        worst = worst.max((got - want).abs());
    }
    outcome(
        worst <= 1e-12 && active > 0 && inactive > 0,
        format!("1000 triples ({active} active, {inactive} inactive), max abs error {worst:.1e}"),
    )
}

fn c3_knn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=500);
        let d = rng.random_range(1..=64);
        let mut rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        // duplicated rows force exact ties
        for _ in 0..n / 10 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            rows[b] = rows[a].clone();
        }
        let map = DescriptorMap::new(
            d,
            rows.concat(),
            vec![Pose::new(0.0, 0.0); n],
            (0..n).map(|i| format!("r{i}")).collect(),
            Fingerprint([0; 32]),
            false,
        )
        .unwrap();
        let query: Vec<f64> = if rng.random_bool(0.3) {
            rows[rng.random_range(0..n)]
                .iter()
                .map(|&v| v as f64)
                .collect()
        } else {
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let k = rng.random_range(1..=n);
        let got = knn_slice(&map, &query, k).unwrap();
        let mut brute: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = r
                    .iter()
                    .zip(&query)
                    .map(|(&a, b)| (a as f64 - b).powi(2))
                    .sum();
                (i, d2.sqrt())
            })
            .collect();
        brute.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        brute.truncate(k);
        if got.iter().map(|g| g.0).ne(brute.iter().map(|b| b.0)) {
            mismatches += 1;
        }
        for (g, b) in got.iter().zip(&brute) {
            worst = worst.max((g.1 - b.1).abs());
        }
    }
    outcome(
        mismatches == 0 && worst <= 1e-6,
        format!("50 instances, {mismatches} order mismatches, max distance error {worst:.1e}"),
    )
}

fn c4_mining() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = TrainConfig::default();
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..50 {
        let n_refs = rng.random_range(2..80);
        let d = rng.random_range(1..16);
        // coarse grids make pose and feature ties likely
        let ref_poses: Vec<Pose> = (0..n_refs)
            .map(|_| {
                Pose::new(
                    rng.random_range(0..20) as f64 * 5.0,
                    rng.random_range(0..4) as f64 * 5.0,
                )
            })
            .collect();
        let ref_desc: Vec<Vec<f64>> = (0..n_refs)
            .map(|_| {
                (0..d)
                    .map(|_| rng.random_range(0..4) as f64 * 0.25)
                    .collect()
            })
            .collect();
        let nq = rng.random_range(1..30);
        let query_desc: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                (0..d)
                    .map(|_| rng.random_range(0..4) as f64 * 0.25)
                    .collect()
            })
            .collect();
        let info: Vec<QueryInfo> = (0..nq)
            .map(|_| {
                let s = rng.random_range(0..n_refs);
                QueryInfo {
                    source: Some(s),
                    pose: Some(ref_poses[s]),
                }
            })
            .collect();
        let mined =
            mine_hard_negatives(&query_desc, &info, &ref_desc, &ref_poses, &config).unwrap();
        let mut expected = Vec::new();
        for (qi, (qd, qinfo)) in query_desc.iter().zip(&info).enumerate() {
            let pose = qinfo.pose.unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (ri, rd) in ref_desc.iter().enumerate() {
                if pose.distance(&ref_poses[ri]) <= config.negative_radius {
                    continue;
                }
                let dd = dist(qd, rd);
                if best.is_none_or(|(_, b)| dd < b) {
                    best = Some((ri, dd));
                }
            }
            if let Some((ri, _)) = best {
                expected.push((qi, qinfo.source.unwrap(), ri));
            }
        }
        let got: Vec<(usize, usize, usize)> = mined
            .triplets
            .iter()
            .map(|t| (t.query, t.positive, t.negative))
            .collect();
        compared += expected.len();
        if got != expected {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("50 instances, {compared} queries compared, {mismatches} mismatching instances"),
    )
}

fn tiny_world(n: usize) -> Dataset {
    let img = |seed: usize| {
        RgbImage::from_fn(24, 24, move |x, y| {
            let v = ((x * 7 + y * 3 + seed * 11) % 17) as f32 / 16.0;
            [v, 1.0 - v, ((x + seed) % 5) as f32 / 4.0]
        })
    };
    let refs: Vec<ImageRecord> = (0..n)
        .map(|i| ImageRecord::new(format!("r{i:03}"), img(i), None))
        .collect();
    let queries: Vec<ImageRecord> = (0..n)
        .map(|i| ImageRecord::new(format!("q{i:03}"), img(i + 1), None))
        .collect();
    let poses: Vec<Pose> = (0..n).map(|i| Pose::new(i as f64 * 30.0, 0.0)).collect();
    Dataset::new("tiny", queries, poses.clone(), refs, poses).unwrap()
}

fn c5_structure() -> Outcome {
    let ds = tiny_world(6);
    let spec = AugmentationSpec::default();
    let mut problems = Vec::new();
    for m in [1, 2, 4] {
        let stream = build_finetune_stream(&ds, m, &spec, 5).unwrap();
        for epoch in 0..2 {
            let qs = stream.realize(epoch).unwrap();
            if qs.len() != m * ds.references().len() {
                problems.push(format!("M={m}: {} queries", qs.len()));
            }
            if qs
                .iter()
                .any(|q| q.record.pose != Some(ds.reference_poses()[q.source]))
            {
                problems.push(format!("M={m}: pose not copied"));
            }
        }
    }
    let model = refset_vpr::embedding::init_model(&[16], 8, 3).unwrap();
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let before = ds.query_reads();
    rsf_finetune(&model, &ds, &config, &spec, None).unwrap();
    let reads = ds.query_reads() - before;
    outcome(
        problems.is_empty() && reads == 0,
        format!(
            "M in {{1,2,4}}: {}; test-query reads during finetuning: {reads}",
            if problems.is_empty() {
                "ok".to_string()
            } else {
                problems.join(", ")
            }
        ),
    )
}

fn pct(r: f64) -> f64 {
    r * 100.0
}

fn c6_domain_gap(run: &DomainGapRun, elapsed: Duration) -> Outcome {
    let base = pct(run.baseline_on_b.r1());
    let tuned = pct(run.finetuned_on_b.r1());
    let pinned = (base - PINNED_BASELINE_B).abs() <= PIN_TOLERANCE
        && (tuned - PINNED_FINETUNED_B).abs() <= PIN_TOLERANCE;
    outcome(
        tuned - base >= MIN_GAIN && pinned && elapsed < Duration::from_secs(600),
        format!(
            "baseline R@1 {base:.1}, RSF R@1 {tuned:.1} (gain {:+.1}); pinned {PINNED_BASELINE_B:.1}/{PINNED_FINETUNED_B:.1} +-{PIN_TOLERANCE}; {:.0}s",
            tuned - base,
            elapsed.as_secs_f64()
        ),
    )
}

fn c7_generalization(protocol: &DomainGapProtocol, worlds: &Worlds, run: &DomainGapRun) -> Outcome {
    let models = [
        ("baseline".to_string(), &run.baseline),
        ("rsf-b".to_string(), &run.finetuned),
    ];
    let matrix =
        generalization_matrix(&models, &[&worlds.a_test, &worlds.b], protocol.radius, &[1]);
    let loss = pct(run.baseline_on_a.r1()) - pct(run.finetuned_on_a.r1());
    let diagonal = matrix.column_argmax(0, 1) == Some(0) && matrix.column_argmax(1, 1) == Some(1);
    let cell = |r, c| pct(matrix.recall(r, c, 1).unwrap_or(f64::NAN));
    outcome(
        loss <= MAX_GENERALIZATION_LOSS && diagonal,
        format!(
            "A: baseline {:.1}, rsf-b {:.1} (loss {loss:.1}); B: baseline {:.1}, rsf-b {:.1}; diagonal maximal: {diagonal}",
            cell(0, 0),
            cell(1, 0),
            cell(0, 1),
            cell(1, 1)
        ),
    )
}

fn c8_poses(protocol: &DomainGapProtocol, worlds: &Worlds, run: &DomainGapRun) -> Outcome {
    let (poseless, _) = protocol
        .finetune_on_b(&run.baseline, worlds, AugmentSelection::All, true)
        .unwrap();
    let free = pct(protocol.evaluate(&poseless, &worlds.b).unwrap().r1());
    let base = pct(run.baseline_on_b.r1());
    let posed = pct(run.finetuned_on_b.r1());
    outcome(
        free >= base && free <= posed + POSELESS_TIE,
        format!("baseline {base:.1} <= poseless {free:.1} <= poses {posed:.1} (+{POSELESS_TIE})"),
    )
}

fn c9_augmentations(protocol: &DomainGapProtocol, worlds: &Worlds, run: &DomainGapRun) -> Outcome {
    let r1 = |selection| {
        let (m, _) = protocol
            .finetune_on_b(&run.baseline, worlds, selection, false)
            .unwrap();
        pct(protocol.evaluate(&m, &worlds.b).unwrap().r1())
    };
    let appearance = r1(AugmentSelection::Appearance);
    let viewpoint = r1(AugmentSelection::Viewpoint);
    let none = r1(AugmentSelection::None);
    let all = pct(run.finetuned_on_b.r1());
    outcome(
        appearance >= viewpoint && none < all,
        format!(
            "appearance {appearance:.1} >= viewpoint {viewpoint:.1}; none {none:.1} < all {all:.1}"
        ),
    )
}

/// Everything a run writes: models, the finetuned map on B, and the report.
fn artifacts(run: &DomainGapRun, worlds: &Worlds) -> Vec<Vec<u8>> {
    let report: String = [
        &run.baseline_on_b,
        &run.finetuned_on_b,
        &run.baseline_on_a,
        &run.finetuned_on_a,
    ]
    .iter()
    .flat_map(|r| r.csv_rows())
    .collect::<Vec<_>>()
    .join("\n");
    vec![
        run.baseline.to_bytes(),
        run.finetuned.to_bytes(),
        build_map(&worlds.b, &run.finetuned).unwrap().to_bytes(),
        report.into_bytes(),
    ]
}

fn c10_determinism(protocol: &DomainGapProtocol, first: &[Vec<u8>]) -> Outcome {
    let worlds = protocol.build_worlds().unwrap();
    let run = run_domain_gap(protocol, &worlds).unwrap();
    let second = artifacts(&run, &worlds);
    let names = ["baseline model", "finetuned model", "map", "report"];
    let differing: Vec<&str> = names
        .iter()
        .zip(first.iter().zip(&second))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| *n)
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "second run byte-identical (models, map, report)".to_string()
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn c11_formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = random_model(&mut rng);
    let model_bytes = model.to_bytes();
    let model_ok = EmbeddingModel::from_bytes(&model_bytes)
        .map(|m| m.to_bytes() == model_bytes)
        .unwrap_or(false);

    let n = 5;
    let d = 3;
    let map = DescriptorMap::new(
        d,
        (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        (0..n).map(|i| Pose::new(i as f64 * 1.5, -2.25)).collect(),
        (0..n).map(|i| format!("ref-{i}")).collect(),
        model.fingerprint(),
        true,
    )
    .unwrap();
    let map_bytes = map.to_bytes();
    let map_ok = DescriptorMap::from_bytes(&map_bytes)
        .map(|m| m.to_bytes() == map_bytes && m == map)
        .unwrap_or(false);

    let mut bad_magic = model_bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_map_magic = map_bytes.clone();
    bad_map_magic[1] ^= 0xff;
    let errors_ok = matches!(
        EmbeddingModel::from_bytes(&bad_magic),
        Err(VprError::FormatError(_))
    ) && matches!(
        DescriptorMap::from_bytes(&bad_map_magic),
        Err(VprError::FormatError(_))
    ) && matches!(
        EmbeddingModel::from_bytes(&model_bytes[..model_bytes.len() - 3]),
        Err(VprError::TruncatedError { .. })
    ) && matches!(
        DescriptorMap::from_bytes(&map_bytes[..map_bytes.len() - 7]),
        Err(VprError::TruncatedError { .. })
    );
    outcome(
        model_ok && map_ok && errors_ok,
        format!("model round-trip {model_ok}, map round-trip {map_ok}, magic/truncation errors {errors_ok}"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!(
            "[{}] {id:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };

    report(1, "gradient correctness", c1_gradients());
    report(2, "triplet loss formula", c2_triplet_formula());
    report(3, "retrieval oracle", c3_knn());
    report(4, "mining oracle", c4_mining());
    report(5, "finetuning set structure", c5_structure());

    let protocol = DomainGapProtocol::default();
    let started = Instant::now();
    let worlds = protocol.build_worlds().expect("worlds");
    let run = run_domain_gap(&protocol, &worlds).expect("domain-gap run");
    let elapsed = started.elapsed();
    let first = artifacts(&run, &worlds);
    report(6, "domain-gap reproduction", c6_domain_gap(&run, elapsed));
    report(
        7,
        "generalization retention",
        c7_generalization(&protocol, &worlds, &run),
    );
    report(8, "pose ablation", c8_poses(&protocol, &worlds, &run));
    report(
        9,
        "augmentation ablation",
        c9_augmentations(&protocol, &worlds, &run),
    );
    report(10, "determinism", c10_determinism(&protocol, &first));
    report(11, "format round-trips", c11_formats());

    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
