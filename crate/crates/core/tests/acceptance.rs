//! Acceptance checks. Prints one PASS/FAIL line per criterion. Failures
//! make the process exit non-zero only when `HYPERFED_ACCEPTANCE_STRICT=1`,
//! so a plain `cargo test` still runs every other target.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use hyperfed::data::{partition_dirichlet, partition_quantity_skew, synth_blobs, ClientSplit, Dataset, PartitionPlan};
use hyperfed::engine::{
    keep_count, prune_delta, weighted_average, Algorithm, Federation, FederationSetup, NewClient, Phase,
    RoundConfig, CSV_HEADER, INDEX_BYTES, VALUE_BYTES,
};
use hyperfed::experiment::{load_dataset, parse_config_str, prepare, run, RunOptions};
use hyperfed::hypernet::{
    generate_params, hypernet_backward, EmbeddingMatrix, FeatureExtractor, FreezeMode, Grouping, HeadGroup,
    HypernetConfig, Hypernetwork,
};
use hyperfed::model::{flat_param_count, pack, zoo, ArchitectureSpec, FlatParams};
use hyperfed::tensor::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward,
    dense_backward, dense_forward, kd_loss, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    residual_add, residual_add_backward, softmax_cross_entropy, BatchNormMode, ConvGeometry, SgdConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

const FD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;
const SHAPES_PER_OP: usize = 50;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_EPS;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - FD_EPS;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * FD_EPS)
        })
        .collect()
}

struct GradStats {
    worst: f64,
    shapes: usize,
}

impl GradStats {
    fn see(&mut self, analytic: &Tensor, numeric: &[f64]) {
        self.worst = self.worst.max(rel_err(analytic.data(), numeric));
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut report = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, stats: GradStats| {
        ok &= stats.worst <= GRAD_TOL && stats.shapes >= SHAPES_PER_OP;
        report.push(format!("{name} {:.1e}", stats.worst));
    };

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    for _ in 0..SHAPES_PER_OP {
        let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let (x, w, bias, r) = (random(&mut rng, &[b, i]), random(&mut rng, &[i, o]), random(&mut rng, &[o]), random(&mut rng, &[b, o]));
        let (_, cache) = dense_forward(&x, &w, &bias).unwrap();
        let g = dense_backward(&r, &cache).unwrap();
        s.see(&g.input, &numeric(&x, &|x| dense_forward(x, &w, &bias).unwrap().0.dot(&r)));
        s.see(&g.weight, &numeric(&w, &|w| dense_forward(&x, w, &bias).unwrap().0.dot(&r)));
        s.see(&g.bias, &numeric(&bias, &|bias| dense_forward(&x, &w, bias).unwrap().0.dot(&r)));
        s.shapes += 1;
    }
    record("dense", s);

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    while s.shapes < SHAPES_PER_OP {
        let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let k = rng.random_range(1..4);
        let geo = ConvGeometry::new(rng.random_range(1..3), rng.random_range(0..2));
        let (Some(oh), Some(ow)) = (geo.output_size(h, k), geo.output_size(w, k)) else { continue };
        let x = random(&mut rng, &[b, cin, h, w]);
        let kernel = random(&mut rng, &[cout, cin, k, k]);
        let bias = random(&mut rng, &[cout]);
        let r = random(&mut rng, &[b, cout, oh, ow]);
        let (_, cache) = conv2d_forward(&x, &kernel, Some(&bias), geo).unwrap();
        let g = conv2d_backward(&r, &cache).unwrap();
        s.see(&g.input, &numeric(&x, &|x| conv2d_forward(x, &kernel, Some(&bias), geo).unwrap().0.dot(&r)));
        s.see(&g.kernel, &numeric(&kernel, &|kn| conv2d_forward(&x, kn, Some(&bias), geo).unwrap().0.dot(&r)));
        s.see(g.bias.as_ref().unwrap(), &numeric(&bias, &|bs| conv2d_forward(&x, &kernel, Some(bs), geo).unwrap().0.dot(&r)));
        s.shapes += 1;
    }
    record("conv2d", s);

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    for _ in 0..SHAPES_PER_OP {
        let shape = [rng.random_range(1..4), rng.random_range(1..9)];
        let x = random(&mut rng, &shape);
        let r = random(&mut rng, &shape);
        let (_, cache) = relu_forward(&x);
        s.see(&relu_backward(&r, &cache).unwrap(), &numeric(&x, &|x| relu_forward(x).0.dot(&r)));
        let other = random(&mut rng, &shape);
        let (ga, gb) = residual_add_backward(&r);
        s.see(&ga, &numeric(&x, &|x| residual_add(x, &other).unwrap().dot(&r)));
        s.see(&gb, &numeric(&other, &|o| residual_add(&x, o).unwrap().dot(&r)));
        s.shapes += 1;
    }
    record("relu+residual", s);

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    for _ in 0..SHAPES_PER_OP {
        let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..7), rng.random_range(2..7)];
        let x = random(&mut rng, &shape);
        let (y, cache) = maxpool2_forward(&x).unwrap();
        let r = random(&mut rng, y.shape());
        s.see(&maxpool2_backward(&r, &cache).unwrap(), &numeric(&x, &|x| maxpool2_forward(x).unwrap().0.dot(&r)));
        let k = rng.random_range(1..=shape[2].min(shape[3]));
        let (y, cache) = avgpool_forward(&x, k).unwrap();
        let r = random(&mut rng, y.shape());
        s.see(&avgpool_backward(&r, &cache).unwrap(), &numeric(&x, &|x| avgpool_forward(x, k).unwrap().0.dot(&r)));
        s.shapes += 1;
    }
    record("pooling", s);

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    while s.shapes < SHAPES_PER_OP {
        let c = rng.random_range(1..4);
        let shape: Vec<usize> = if s.shapes.is_multiple_of(2) {
            vec![rng.random_range(3..7), c]
        } else {
            vec![rng.random_range(1..3), c, rng.random_range(1..4), rng.random_range(2..4)]
        };
        // With two values per channel the output is +-1 whatever the input,
        // so the true gradient is ~0 and differences measure only rounding.
        if shape[0] * shape[2..].iter().product::<usize>() < 3 {
            continue;
        }
        let x = random(&mut rng, &shape);
        let gamma = random(&mut rng, &[c]);
        let beta = random(&mut rng, &[c]);
        let r = random(&mut rng, &shape);
        let bn = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let (mut m, mut v) = (Tensor::zeros(&[c]), Tensor::filled(&[c], 1.0));
            batchnorm_forward(x, g, b, &mut m, &mut v, BatchNormMode::Train { momentum: 0.1 }).unwrap()
        };
        let (_, cache) = bn(&x, &gamma, &beta);
        let g = batchnorm_backward(&r, &cache).unwrap();
        s.see(&g.input, &numeric(&x, &|x| bn(x, &gamma, &beta).0.dot(&r)));
        s.see(&g.gamma, &numeric(&gamma, &|gm| bn(&x, gm, &beta).0.dot(&r)));
        s.see(&g.beta, &numeric(&beta, &|bt| bn(&x, &gamma, bt).0.dot(&r)));
        s.shapes += 1;
    }
    record("batchnorm", s);

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    for _ in 0..SHAPES_PER_OP {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let logits = Tensor::from_fn(&[b, c], |_| rng.random_range(-4.0..4.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        s.see(&g, &numeric(&logits, &|l| softmax_cross_entropy(l, &labels).unwrap().0));
        s.shapes += 1;
    }
    record("softmax-ce", s);

    let mut s = GradStats { worst: 0.0, shapes: 0 };
    for _ in 0..SHAPES_PER_OP {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let t = rng.random_range(0.5..20.0);
        let student = Tensor::from_fn(&[b, c], |_| rng.random_range(-4.0..4.0));
        let teacher = Tensor::from_fn(&[b, c], |_| rng.random_range(-4.0..4.0));
        let (_, g) = kd_loss(&student, &teacher, t).unwrap();
        s.see(&g, &numeric(&student, &|st| kd_loss(st, &teacher, t).unwrap().0));
        s.shapes += 1;
    }
    record("kd", s);

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    (ok, format!("{SHAPES_PER_OP} shapes/op, worst rel err: {}; {secs:.1}s", report.join(", ")))
}

fn vjp_objective(ex: &FeatureExtractor, head: &HeadGroup, emb: &EmbeddingMatrix, k: usize, u: &[f64]) -> f64 {
    let theta = generate_params(ex, head, emb, k).unwrap();
    theta.0.iter().zip(u).map(|(a, b)| a * b).sum()
}

fn vjp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let fixtures = 120;
    let mut worst: f64 = 0.0;
    for f in 0..fixtures {
        let d = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let tau = rng.random_range(1..=3);
        let k = rng.random_range((tau - 1) * n + 1..=tau * n);
        let headless = f % 5 == 4;
        let mut ex = FeatureExtractor::init(d, h, if headless { n } else { h }, &mut rng);
        let mut head = if headless {
            HeadGroup::passthrough(tau, n)
        } else {
            HeadGroup::init(tau, h, n, &mut rng)
        };
        let mut emb = EmbeddingMatrix::init(tau, d, &mut rng);
        let u: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = hypernet_backward(&ex, &head, &emb, k, &u).unwrap();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        macro_rules! probe {
            ($t:expr, $g:expr) => {
                for i in 0..$t.len() {
                    let orig = $t.data()[i];
                    $t.data_mut()[i] = orig + FD_EPS;
                    let plus = vjp_objective(&ex, &head, &emb, k, &u);
                    $t.data_mut()[i] = orig - FD_EPS;
                    let minus = vjp_objective(&ex, &head, &emb, k, &u);
                    $t.data_mut()[i] = orig;
                    num.push((plus - minus) / (2.0 * FD_EPS));
                    ana.push($g.data()[i]);
                }
            };
        }
        for l in 0..ex.layers.len() {
            probe!(ex.layers[l].weight, grads.extractor[l].0);
            probe!(ex.layers[l].bias, grads.extractor[l].1);
        }
        if let Some((gw, gb)) = &grads.head {
            probe!(head.weight, gw);
            probe!(head.bias, gb);
        }
        probe!(emb.values, grads.embedding);
        worst = worst.max(rel_err(&ana, &num));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= GRAD_TOL && secs < 60.0,
        format!("{fixtures} fixtures, worst rel err {worst:.1e}; {secs:.1}s"),
    )
}

fn chunking_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut draws = 0;
    for trial in 0..40 {
        let n = rng.random_range(1..40);
        let mut hn = Hypernetwork::new(HypernetConfig {
            embed_dim: 3,
            hidden_dim: 4,
            chunk_size: n,
            grouping: Grouping::ChunkCount,
            seed: trial,
            ..HypernetConfig::default()
        })
        .unwrap();
        let mut by_tau = std::collections::BTreeMap::new();
        for id in 0..25 {
            let k = rng.random_range(1..=4 * n);
            let reg = hn.register_client(id, k).unwrap();
            let out = hn.generate(id).unwrap();
            if out.len() != k || !((reg.tau - 1) * n < k && k <= reg.tau * n) {
                return (false, format!("K={k} N={n}: len {} tau {}", out.len(), reg.tau));
            }
            by_tau.entry(reg.tau).or_insert_with(BTreeSet::new).insert(reg.key);
            draws += 1;
        }
        if by_tau.values().any(|keys| keys.len() != 1) || hn.num_groups() != by_tau.len() {
            return (false, format!("N={n}: equal chunk counts mapped to several heads"));
        }
    }
    (true, format!("{draws} draws, one head per chunk count"))
}

fn pruning() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for k in 1..=10_000usize {
        // Integer values make ties common.
        let ties = k % 3 == 0;
        let values: Vec<f64> = (0..k)
            .map(|_| if ties { rng.random_range(-5i32..=5) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let sparse = prune_delta(&FlatParams(values.clone()), 0.3).unwrap();
        let want = (3 * k).div_ceil(10);
        if sparse.indices.len() != want || keep_count(k, 0.3) != want {
            return (false, format!("K={k}: kept {} want {want}", sparse.indices.len()));
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
        let threshold = values[order[want - 1]].abs();
        let kept: BTreeSet<usize> = sparse.indices.iter().copied().collect();
        if kept.len() != want || kept.iter().any(|&i| values[i].abs() < threshold) {
            return (false, format!("K={k}: a kept entry is below the top-{want} magnitude"));
        }
        let oracle: BTreeSet<usize> = order[..want].iter().copied().collect();
        if kept != oracle {
            return (false, format!("K={k}: kept set differs from sort oracle"));
        }
        if sparse.values.iter().zip(&sparse.indices).any(|(v, &i)| *v != values[i]) {
            return (false, format!("K={k}: kept values altered"));
        }
    }
    (true, format!("K=1..10000 match the sort oracle; {:.1}s", start.elapsed().as_secs_f64()))
}

fn partition_suite() -> Outcome {
    let ds = synth_blobs(10, 1000, &[2], 0.5, 5).unwrap();
    let conserved = |plan: &PartitionPlan| {
        let mut all: Vec<usize> = plan.clients.iter().flat_map(|c| c.train.iter().chain(&c.test).copied()).collect();
        all.sort_unstable();
        all == (0..ds.len()).collect::<Vec<_>>()
    };
    for seed in 0..5 {
        let a = partition_quantity_skew(&ds, 20, 3, true, seed).unwrap();
        if a != partition_quantity_skew(&ds, 20, 3, true, seed).unwrap() || !conserved(&a) {
            return (false, format!("quantity skew seed {seed}: not deterministic or not conserving"));
        }
        if (0..20).any(|c| a.label_set(&ds, c).len() != 3) {
            return (false, format!("quantity skew seed {seed}: a client does not hold exactly 3 classes"));
        }
        let b = partition_dirichlet(&ds, 20, 0.5, seed).unwrap();
        if b != partition_dirichlet(&ds, 20, 0.5, seed).unwrap() || !conserved(&b) {
            return (false, format!("dirichlet seed {seed}: not deterministic or not conserving"));
        }
    }
    let mut medians = Vec::new();
    for seed in 0..20 {
        let plan = partition_dirichlet(&ds, 10, 0.01, seed).unwrap();
        if !conserved(&plan) {
            return (false, format!("dirichlet(0.01) seed {seed}: samples lost"));
        }
        let mut shares: Vec<f64> = plan
            .clients
            .iter()
            .map(|c| {
                let mut counts = [0usize; 10];
                for &i in c.train.iter().chain(&c.test) {
                    counts[ds.labels()[i]] += 1;
                }
                counts.sort_unstable_by(|a, b| b.cmp(a));
                (counts[0] + counts[1]) as f64 / (c.train.len() + c.test.len()) as f64
            })
            .collect();
        shares.sort_by(f64::total_cmp);
        medians.push((shares[4] + shares[5]) / 2.0);
    }
    let low = medians.iter().copied().fold(f64::INFINITY, f64::min);
    (
        low >= 0.8,
        format!("deterministic, conserving, 3 labels/client; dirichlet(0.01) lowest median top-2 share {low:.3} over 20 seeds"),
    )
}

fn tiny_mlp(ds: &Dataset) -> Arc<ArchitectureSpec> {
    Arc::new(zoo::builtin("tiny-mlp", ds.feature_shape(), ds.classes()).unwrap())
}

fn bits(p: &FlatParams) -> Vec<u64> {
    p.0.iter().map(|v| v.to_bits()).collect()
}

fn fedavg_oracle() -> Outcome {
    let a = FlatParams(vec![1.0, -2.0, 0.5]);
    let b = FlatParams(vec![3.0, 2.0, 0.25]);
    let c = FlatParams(vec![-1.0, 4.0, 1.0]);
    let avg = weighted_average(&[(&a, 1.0), (&b, 1.0), (&c, 2.0)]).unwrap();
    if avg.0 != vec![0.5, 2.0, 0.6875] {
        return (false, format!("weighted mean {:?}", avg.0));
    }
    let avg = weighted_average(&[(&a, 3.0), (&b, 1.0)]).unwrap();
    if avg.0 != vec![1.5, -1.0, 0.4375] {
        return (false, format!("weighted mean {:?}", avg.0));
    }

    let ds = Arc::new(synth_blobs(4, 40, &[8], 0.3, 3).unwrap());
    let split = ClientSplit {
        train: (0..ds.len()).filter(|i| i % 4 != 0).collect(),
        test: (0..ds.len()).filter(|i| i % 4 == 0).collect(),
    };
    let make = |alg| {
        Federation::new(FederationSetup {
            round: RoundConfig {
                algorithm: alg,
                rounds: 5,
                local_epochs: 2,
                batch_size: 16,
                sgd: SgdConfig {
                    lr: 0.05,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                },
                seed: 9,
                ..RoundConfig::default()
            },
            hypernet: HypernetConfig::default(),
            dataset: ds.clone(),
            clients: vec![NewClient {
                arch: tiny_mlp(&ds),
                split: split.clone(),
            }],
            global_arch: None,
        })
        .unwrap()
    };
    let mut fedavg = make(Algorithm::FedAvg);
    let mut local = make(Algorithm::Local);
    fedavg.run(|_| Ok(())).unwrap();
    local.run(|_| Ok(())).unwrap();
    let same = bits(&pack(fedavg.global_model().unwrap())) == bits(&pack(&local.clients()[0].model));
    (same, format!("fixtures exact; single-client fedavg {} local training", if same { "bitwise equals" } else { "differs from" }))
}

/// `extra` lines go into the `[training]` table and override its defaults.
fn desk_config(alg: &str, seed: u64, extra: &str) -> String {
    let eval = if extra.contains("eval_every") { "" } else { "eval_every = 100\n" };
    format!("preset = \"blobs-desk\"\nseed = {seed}\n[training]\nalgorithm = \"{alg}\"\n{eval}{extra}")
}

fn run_desk(root: &Path, alg: &str, seed: u64, extra: &str) -> (f64, String) {
    let cfg = parse_config_str(&desk_config(alg, seed, extra)).unwrap();
    let dir = root.join(format!("{alg}-{seed}"));
    let summary = run(
        &cfg,
        &RunOptions {
            out_dir: Some(dir),
            ..RunOptions::default()
        },
    )
    .unwrap();
    (summary.final_mean_accuracy.unwrap(), std::fs::read_to_string(summary.metrics_path).unwrap())
}

fn desk_learning(root: &Path) -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let algs = ["mh-pfedhn", "mh-pfedhng", "mh-pfedhngd", "local", "fedavg"];
    let seeds = [0u64, 1, 2];
    let mut acc = vec![[0.0; 5]; seeds.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        for (ai, alg) in algs.iter().enumerate() {
            acc[si][ai] = run_desk(root, alg, seed, "").0 * 100.0;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |a: usize| acc.iter().map(|r| r[a]).sum::<f64>() / seeds.len() as f64;
    let (hn, hng, hngd, local, fedavg) = (mean(0), mean(1), mean(2), mean(3), mean(4));
    let table = acc
        .iter()
        .zip(seeds)
        .map(|(r, s)| format!("seed {s}: hn {:.1} hng {:.1} hngd {:.1} local {:.1} fedavg {:.1}", r[0], r[1], r[2], r[3], r[4]))
        .collect::<Vec<_>>()
        .join("; ");
    println!("  desk accuracies (%) {table}; {secs:.0}s");
    let a = hn >= local && hn >= fedavg + 10.0 && secs < 600.0;
    let trend = acc.iter().filter(|r| r[2] >= r[1] && r[1] >= r[0]).count();
    let b = hngd >= hn - 1.0 && hngd >= hng - 1.0 && trend >= 2;
    vec![
        (
            "desk learning (a)".into(),
            (a, format!("mean hn {hn:.1} vs local {local:.1}, fedavg {fedavg:.1} (+10 needed)")),
        ),
        (
            "desk learning (b)".into(),
            (b, format!("mean hngd {hngd:.1} vs hn {hn:.1}, hng {hng:.1}; hngd>=hng>=hn in {trend}/3 seeds")),
        ),
    ]
}

fn lambda_collapse(root: &Path) -> Outcome {
    let extra = "rounds = 30\neval_every = 5\n";
    let (_, g) = run_desk(&root.join("collapse-g"), "mh-pfedhng", 7, extra);
    let (_, gd) = run_desk(&root.join("collapse-gd"), "mh-pfedhngd", 7, &format!("{extra}lambda = 1.0\n"));
    let ck = |p: &str, a: &str| std::fs::read(root.join(p).join(format!("{a}-7")).join("checkpoint.bin")).unwrap();
    let ckg = ck("collapse-g", "mh-pfedhng");
    let ckgd = ck("collapse-gd", "mh-pfedhngd");
    // The checkpoint embeds the algorithm name, so compare the hypernetwork state instead.
    let cfg = parse_config_str(&desk_config("mh-pfedhng", 7, extra)).unwrap();
    let ds = Arc::new(load_dataset(&cfg, Path::new(".")).unwrap());
    let phi = |bytes: &[u8]| Federation::from_bytes(bytes, ds.clone()).unwrap().hypernetwork().unwrap().phi_checksum();
    let ok = g == gd && phi(&ckg) == phi(&ckgd);
    (ok, format!("30 rounds, metrics {} and hypernetwork {}", if g == gd { "identical" } else { "differ" }, if phi(&ckg) == phi(&ckgd) { "identical" } else { "differs" }))
}

fn novel_accuracy(fed: &Federation, first: usize) -> f64 {
    let accs: Vec<f64> = fed.evaluate_clients().unwrap().into_iter().filter(|r| r.0 >= first).map(|r| r.1).collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

fn generalization() -> Vec<(String, Outcome)> {
    let text = desk_config("mh-pfedhn", 0, "[generalization]\nmode = \"embeddings-only\"\nholdout = 0.2\n");
    let cfg = parse_config_str(&text).unwrap();
    let prepared = prepare(&cfg, &RunOptions::default()).unwrap();
    let mut fed = prepared.federation;
    fed.run(|_| Ok(())).unwrap();
    let trained = fed.to_bytes().unwrap();
    let first = fed.clients().len();
    let chance = 1.0 / prepared.dataset.classes() as f64;

    let phi = fed.hypernetwork().unwrap().phi_checksum();
    fed.begin_generalization(FreezeMode::EmbeddingsOnly, prepared.holdout.clone(), 20).unwrap();
    let before = novel_accuracy(&fed, first);
    let mut best_round = None;
    let mut after = before;
    while !fed.is_finished() {
        fed.run_round().unwrap();
        after = novel_accuracy(&fed, first);
        if best_round.is_none() && after >= 2.0 * chance {
            best_round = Some(fed.completed_rounds() - 100);
        }
    }
    let frozen = fed.hypernetwork().unwrap().phi_checksum() == phi;
    let emb_ok = frozen && before <= chance + 0.05 && after >= 2.0 * chance;

    let mut fed = Federation::from_bytes(&trained, prepared.dataset.clone()).unwrap();
    let extractor = fed.hypernetwork().unwrap().extractor_checksum();
    let wide = Arc::new(zoo::mlp("wide-mlp", prepared.dataset.feature_shape(), &[24], prepared.dataset.classes()).unwrap());
    let newcomers = prepared
        .holdout
        .iter()
        .map(|c| NewClient {
            arch: wide.clone(),
            split: c.split.clone(),
        })
        .collect();
    let groups = fed.hypernetwork().unwrap().num_groups();
    fed.begin_generalization(FreezeMode::NewHead, newcomers, 20).unwrap();
    let added = fed.hypernetwork().unwrap().num_groups() - groups;
    let new_before = novel_accuracy(&fed, first);
    fed.run(|_| Ok(())).unwrap();
    let new_after = novel_accuracy(&fed, first);
    let head_ok = fed.hypernetwork().unwrap().extractor_checksum() == extractor && added == 1;
    vec![
        (
            "generalization: embeddings-only".into(),
            (
                emb_ok,
                format!(
                    "phi {}; held-out accuracy {:.1}% -> {:.1}% (chance {:.0}%, 2x reached at round {:?})",
                    if frozen { "byte-identical" } else { "changed" },
                    before * 100.0,
                    after * 100.0,
                    chance * 100.0,
                    best_round
                ),
            ),
        ),
        (
            "generalization: new-head".into(),
            (
                head_ok,
                format!("{added} new head, extractor unchanged: {head_ok}; held-out accuracy {:.1}% -> {:.1}%", new_before * 100.0, new_after * 100.0),
            ),
        ),
    ]
}

fn determinism_and_accounting(root: &Path) -> Outcome {
    let extra = "rounds = 10\neval_every = 5\nprune_fraction = 0.3\nparticipation = 0.5\n";
    let (_, a) = run_desk(&root.join("det-a"), "mh-pfedhngd", 4, extra);
    let (_, b) = run_desk(&root.join("det-b"), "mh-pfedhngd", 4, extra);
    let cfg = parse_config_str(&desk_config("mh-pfedhngd", 4, extra)).unwrap();
    let c = std::fs::read_to_string(
        run(
            &cfg,
            &RunOptions {
                out_dir: Some(root.join("det-c")),
                workers: Some(3),
                ..RunOptions::default()
            },
        )
        .unwrap()
        .metrics_path,
    )
    .unwrap();
    if a != b || a != c {
        return (false, "repeated runs produced different CSVs".into());
    }
    let prepared = prepare(&cfg, &RunOptions::default()).unwrap();
    let k = flat_param_count(prepared.federation.clients()[0].arch());
    let want = keep_count(k, 0.3) as u64 * (INDEX_BYTES + VALUE_BYTES);
    let mut checked = 0;
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (phase, up) = (col("phase"), col("uplink_bytes"));
    for line in a.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[phase] == "personal" || f[phase] == "global" {
            if f[up].parse::<u64>().unwrap() != want {
                return (false, format!("uplink {} != {want} in row {line}", f[up]));
            }
            checked += 1;
        }
    }
    (
        checked > 0 && want == ((3 * k).div_ceil(10) * 8) as u64,
        format!("3 runs (1 and 3 workers) byte-identical; {checked} uploads of K={k} each {want} bytes"),
    )
}

fn heterogeneous_fleet() -> Outcome {
    let ds = Arc::new(synth_blobs(10, 60, &[1, 8, 8], 0.35, 8).unwrap());
    let plan = partition_quantity_skew(&ds, 10, 3, false, 8).unwrap();
    let names = ["tiny-lenet", "mlp", "tiny-vgg8", "tiny-resnet10", "tiny-mlp"];
    let archs: Vec<Arc<ArchitectureSpec>> = names
        .iter()
        .map(|n| Arc::new(zoo::builtin(n, ds.feature_shape(), ds.classes()).unwrap()))
        .collect();
    let clients = plan
        .clients
        .iter()
        .enumerate()
        .map(|(i, s)| NewClient {
            arch: archs[i % archs.len()].clone(),
            split: s.clone(),
        })
        .collect();
    let fed = Federation::new(FederationSetup {
        round: RoundConfig {
            algorithm: Algorithm::MhPfedhngd,
            rounds: 20,
            local_epochs: 1,
            batch_size: 32,
            lambda: 0.9,
            temperature: 1.0,
            prune_fraction: 0.3,
            sgd: SgdConfig {
                lr: 0.02,
                ..SgdConfig::default()
            },
            eval_every: 5,
            seed: 8,
            ..RoundConfig::default()
        },
        hypernet: HypernetConfig {
            chunk_size: 512,
            ..HypernetConfig::default()
        },
        dataset: ds.clone(),
        clients,
        global_arch: None,
    });
    let mut fed = match fed {
        Ok(f) => f,
        Err(e) => return (false, format!("setup failed: {e}")),
    };
    let ks: Vec<usize> = archs.iter().map(|a| flat_param_count(a)).collect();
    let k_min = *ks.iter().min().unwrap();
    let hn = fed.hypernetwork().unwrap();
    let mut problems = Vec::new();
    if hn.global_k() != Some(k_min) {
        problems.push(format!("K_g {:?} != min K {k_min}", hn.global_k()));
    }
    for c in fed.clients() {
        if hn.generate(c.id).map(|p| p.len()).ok() != Some(flat_param_count(c.arch())) {
            problems.push(format!("client {} generated length", c.id));
        }
    }
    let mut rows = 0;
    let result = fed.run(|m| {
        for r in &m.rows {
            rows += 1;
            let k = flat_param_count(fed_arch(&archs, r.client));
            let bad_acc = !(0.0..=1.0).contains(&r.accuracy);
            let bad_bytes = match r.phase {
                Phase::Personal => r.uplink_bytes != (keep_count(k, 0.3) * 8) as u64 || r.downlink_bytes != 4 * k as u64,
                Phase::Global => r.uplink_bytes != (keep_count(k_min, 0.3) * 8) as u64,
                _ => r.uplink_bytes != 0,
            };
            if bad_acc || bad_bytes || (r.phase == Phase::Eval && !r.loss.is_finite()) {
                return Err(hyperfed::Error::InvalidArgument(format!("bad row {}", r.to_csv_line())));
            }
        }
        Ok(())
    });
    if let Err(e) = result {
        problems.push(e.to_string());
    }
    let ok = problems.is_empty() && fed.completed_rounds() == 20;
    (
        ok,
        format!("archs {names:?} K={ks:?}, K_g={k_min}, {rows} rows checked{}", if ok { String::new() } else { format!("; {}", problems.join("; ")) }),
    )
}

fn fed_arch(archs: &[Arc<ArchitectureSpec>], client: usize) -> &ArchitectureSpec {
    &archs[client % archs.len()]
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut check = |name: &str, outcome: Outcome| {
        println!("{} {name}: {}", if outcome.0 { "PASS" } else { "FAIL" }, outcome.1);
        results.push((name.to_string(), outcome));
    };
    check("gradient suite", gradient_suite());
    check("VJP oracle", vjp_oracle());
    check("chunking laws", chunking_laws());
    check("pruning", pruning());
    check("partition suite", partition_suite());
    check("fedavg oracle", fedavg_oracle());
    for (name, o) in desk_learning(root) {
        check(&name, o);
    }
    check("lambda collapse", lambda_collapse(root));
    for (name, o) in generalization() {
        check(&name, o);
    }
    check("determinism and accounting", determinism_and_accounting(root));
    check("heterogeneous fleet", heterogeneous_fleet());
    let failed = results.iter().filter(|r| !r.1 .0).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("HYPERFED_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
