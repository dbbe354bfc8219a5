//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release --test acceptance`; pass
//! criterion numbers (`-- 3 4 7`) to run a subset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use dge_core::analysis::{export_heatmaps, localization, psi_from_heatmap, redundancy_profile, threshold_sweep};
use dge_core::budget::{complexity_ratio, flops_report, model_costs, query_count, ratio_value, LayerCost};
use dge_core::encoder::{
    dge_block, vanilla_encoder, BlockParams, EncoderConfig, FeatureMap, ModelConfig, Routing, Selection, VitModel,
};
use dge_core::harness::{infer_one, make_dataset, train, RunConfig, TrainOutcome};
use dge_core::router::{partition, select_training, GatingDecision, GranularitySet, RegionPartition};
use dge_core::tensor::gradcheck::{check_gradients, relative_error, GradCheckConfig};
use dge_core::tensor::{gumbel_sample, normal_tensor, Graph, ParamId, ParamStore, RngStream, RowMix, Tensor, Var};

type Check = Result<String, String>;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal_tensor(&mut RngStream::new(seed, 7), shape, 1.0)
}

fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> dge_core::Result<Var> {
    let w = g.leaf(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn err(e: dge_core::DgeError) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> dge_core::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mix = Rc::new(
        RowMix::new(
            4,
            vec![vec![(0, 0.5), (2, -1.5)], vec![(1, 2.0)], vec![(0, 0.25), (1, 0.25), (3, 0.5)]],
        )
        .unwrap(),
    );
    vec![
        ("add", vec![random(&[3, 4], 1), random(&[3, 4], 2)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, 10)
        })),
        ("sub", vec![random(&[3, 4], 3), random(&[3, 4], 4)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted(g, y, 11)
        })),
        ("mul", vec![random(&[3, 4], 5), random(&[3, 4], 6)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, 12)
        })),
        ("add_row", vec![random(&[3, 4], 7), random(&[1, 4], 8)], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted(g, y, 13)
        })),
        ("scale", vec![random(&[3, 4], 9)], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted(g, y, 14)
        })),
        ("add_scalar", vec![random(&[3, 4], 10)], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 0.3);
            let y = g.mul(y, y)?;
            weighted(g, y, 15)
        })),
        ("matmul", vec![random(&[3, 5], 11), random(&[5, 4], 12)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 16)
        })),
        ("transpose", vec![random(&[3, 5], 13)], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            weighted(g, y, 17)
        })),
        ("reshape", vec![random(&[3, 4], 14)], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            weighted(g, y, 18)
        })),
        ("softmax axis 0", vec![random(&[3, 4], 15)], Box::new(|g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted(g, y, 19)
        })),
        ("softmax axis 1", vec![random(&[3, 4], 16)], Box::new(|g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted(g, y, 20)
        })),
        ("layer_norm", vec![random(&[3, 6], 17), random(&[1, 6], 18), random(&[1, 6], 19)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted(g, y, 21)
        })),
        ("gelu", vec![random(&[3, 4], 20)], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted(g, y, 22)
        })),
        ("sum", vec![random(&[3, 4], 21)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
        ("mean", vec![random(&[3, 4], 22)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })),
        ("row_mix", vec![random(&[4, 3], 23)], Box::new(move |g, v| {
            let y = g.row_mix(v[0], mix.clone())?;
            weighted(g, y, 23)
        })),
        ("gather_rows", vec![random(&[4, 3], 24)], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[3, 0, 0, 2, 3])?;
            weighted(g, y, 24)
        })),
        ("scatter_add_rows", vec![random(&[4, 3], 25)], Box::new(|g, v| {
            let y = g.scatter_add_rows(v[0], &[1, 1, 0, 4], 5)?;
            weighted(g, y, 25)
        })),
        ("concat_rows", vec![random(&[2, 3], 26), random(&[3, 3], 27)], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            weighted(g, y, 26)
        })),
        ("slice_rows", vec![random(&[5, 3], 28)], Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            weighted(g, y, 27)
        })),
        ("concat_cols", vec![random(&[3, 2], 29), random(&[3, 4], 30)], Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            weighted(g, y, 28)
        })),
        ("slice_cols", vec![random(&[3, 5], 31)], Box::new(|g, v| {
            let y = g.slice_cols(v[0], 2, 2)?;
            weighted(g, y, 29)
        })),
        ("pick", vec![random(&[3, 4], 32)], Box::new(|g, v| {
            let y = g.pick(v[0], &[1, 3, 0])?;
            weighted(g, y, 30)
        })),
        ("cross_entropy", vec![random(&[1, 5], 33)], Box::new(|g, v| g.cross_entropy(v[0], 2))),
    ]
}

fn small_block(channels: usize, candidates: usize, seed: u64) -> (ParamStore<f64>, BlockParams<ParamId>) {
    let mut store = ParamStore::new();
    let ids = BlockParams::init(&mut store, "b", channels, 2 * channels, candidates, &mut RngStream::new(seed, 0))
        .expect("block init");
    (store, ids)
}

// End-to-end checks score the whole parameter gradient at once: some
// entries (e.g. the key bias, which softmax ignores) are exactly zero, so a
// per-tensor ratio would compare rounding noise with rounding noise.
fn whole_gradient_error(inputs: &[dge_core::tensor::gradcheck::InputReport]) -> f64 {
    let analytic: Vec<f64> = inputs.iter().flat_map(|r| r.analytic.iter().copied()).collect();
    let numeric: Vec<f64> = inputs.iter().flat_map(|r| r.numeric.iter().copied()).collect();
    relative_error(&analytic, &numeric, 1e-10)
}

fn block_end_to_end() -> Result<f64, String> {
    let set = GranularitySet::new(vec![1, 2, 4], Some(4)).map_err(err)?;
    let part = partition(8, 8, 8, &set).map_err(err)?;
    let (store, ids) = small_block(8, 3, 41);
    let handles = ids.handles();
    let mut inputs = vec![random(&[65, 8], 42)];
    inputs.extend(handles.iter().map(|&h| store.value(h).clone()));
    let mut worst: f64 = 0.0;
    let mut rng = RngStream::new(43, 0);
    for _ in 0..3 {
        let theta: Vec<usize> = (0..part.num_regions()).map(|_| rng.below(3)).collect();
        let report = check_gradients(&inputs, GradCheckConfig::default(), |g, v| {
            let p = BlockParams::<Var>::from_handles(&v[1..])?;
            let x = FeatureMap { tokens: v[0], height: 8, width: 8, extra: 1 };
            let out = dge_block(g, x, &p, 2, &part, Selection::Forced(theta.clone()))?;
            weighted(g, out.y.tokens, 44)
        })
        .map_err(err)?;
        worst = worst.max(whole_gradient_error(&report.inputs));
    }
    Ok(worst)
}

fn toy_config(image: usize, patch: usize, channels: usize, layers: usize, phis: Vec<usize>) -> ModelConfig {
    ModelConfig {
        image_size: image,
        in_channels: 1,
        patch_size: patch,
        num_classes: 3,
        encoder: EncoderConfig {
            channels,
            heads: 2,
            ffn_ratio: 2,
            layers,
            granularities: phis,
            ..EncoderConfig::default()
        },
    }
}

fn model_loss(model: &VitModel<f64>, image: &Tensor<f64>, theta: &[Vec<usize>]) -> dge_core::Result<(Graph<f64>, Var)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward(&mut g, &bound, image, Routing::Forced(theta), None)?;
    let loss = g.cross_entropy(out.logits, 1)?;
    Ok((g, loss))
}

fn model_end_to_end() -> Result<f64, String> {
    let config = toy_config(16, 2, 8, 2, vec![1, 2, 4]);
    let mut model = VitModel::<f64>::new(config, &mut RngStream::new(51, 0)).map_err(err)?;
    let image = random(&[1, 16, 16], 52);
    let mut rng = RngStream::new(53, 0);
    let theta: Vec<Vec<usize>> = (0..2).map(|_| (0..4).map(|_| rng.below(3)).collect()).collect();
    let (g, loss) = model_loss(&model, &image, &theta).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    model.params_mut().zero_grad();
    model.params_mut().accumulate(&g, &grads);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let h = 1e-5;
    let eval = |m: &VitModel<f64>| -> Result<f64, String> {
        let (g, loss) = model_loss(m, &image, &theta).map_err(err)?;
        Ok(g.value(loss).item())
    };
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    for id in &ids {
        let analytic = match model.params().grad(*id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; model.params().value(*id).numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = model.params().value(*id).data()[i];
            model.params_mut().value_mut(*id).data_mut()[i] = orig + h;
            let up = eval(&model)?;
            model.params_mut().value_mut(*id).data_mut()[i] = orig - h;
            let down = eval(&model)?;
            model.params_mut().value_mut(*id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }
    Ok(relative_error(&all_analytic, &all_numeric, 1e-10))
}

fn gradient_integrity() -> Check {
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in op_cases() {
        let report = check_gradients(&inputs, GradCheckConfig::default(), |g, v| f(g, v)).map_err(err)?;
        let e = report.max_rel_error();
        if e >= worst_op.1 {
            worst_op = (name, e);
        }
    }
    let block = block_end_to_end()?;
    let model = model_end_to_end()?;
    let detail = format!(
        "worst op {} rel {:.1e} (< 1e-4); dge_block rel {:.1e}, 8x8-token model rel {:.1e} (< 1e-3)",
        worst_op.0, worst_op.1, block, model
    );
    if worst_op.1 < 1e-4 && block < 1e-3 && model < 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 2

fn softmax_at(row: &[f64], k: usize, tau: f64) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| ((v - m) / tau).exp()).sum();
    ((row[k] - m) / tau).exp() / z
}

fn ste_correctness() -> Check {
    let tau = 0.7;
    let set = GranularitySet::new(vec![1, 2, 4], Some(4)).map_err(err)?;
    let part = partition(8, 8, 8, &set).map_err(err)?;
    let (store, ids) = small_block(8, 3, 61);
    let x = random(&[65, 8], 62);
    let a = random(&[65, 8], 63);
    let noise: Tensor<f64> = gumbel_sample(&mut RngStream::new(64, 0), &[4, 3]);

    let mut g = Graph::new();
    let p = ids.bind(&mut g, &store);
    let xv = g.leaf(x.clone());
    let fm = FeatureMap { tokens: xv, height: 8, width: 8, extra: 1 };
    let out = dge_block(&mut g, fm, &p, 2, &part, Selection::Noise { noise: noise.clone(), tau }).map_err(err)?;
    let av = g.leaf(a.clone());
    let prod = g.mul(out.y.tokens, av).map_err(err)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss).map_err(err)?;
    let theta = out.decision.theta.clone();
    let y = g.value(out.y.tokens).clone();

    // Per-region weight of p_i in the surrogate: Σ over the region's tokens
    // of A_t · ŷ_t, with ŷ_t = y_t − x_t on spatial tokens.
    let mut weight = vec![0.0; part.num_regions()];
    for (r, w) in weight.iter_mut().enumerate() {
        for &t in part.region_tokens(r) {
            let row = 1 + t;
            for c in 0..8 {
                *w += a.row(row)[c] * (y.row(row)[c] - x.row(row)[c]);
            }
        }
    }
    let surrogate = |gw: &Tensor<f64>, gb: &Tensor<f64>| -> f64 {
        let mut s = 0.0;
        for r in 0..part.num_regions() {
            let toks = part.region_tokens(r);
            let mut mean = [0.0; 8];
            for &t in toks {
                for c in 0..8 {
                    mean[c] += x.row(1 + t)[c] / toks.len() as f64;
                }
            }
            let z: Vec<f64> = (0..3)
                .map(|k| (0..8).map(|c| mean[c] * gw.row(c)[k]).sum::<f64>() + gb.data()[k] + noise.row(r)[k])
                .collect();
            s += weight[r] * softmax_at(&z, theta[r], tau);
        }
        s
    };
    let (gw, gb) = (store.value(ids.gate.weight).clone(), store.value(ids.gate.bias).clone());
    let h = 1e-6;
    let mut analytic = grads.tensor(p.gate.weight).into_data();
    analytic.extend(grads.tensor(p.gate.bias).into_data());
    let mut numeric = Vec::new();
    for i in 0..gw.numel() + gb.numel() {
        let (mut wu, mut bu, mut wd, mut bd) = (gw.clone(), gb.clone(), gw.clone(), gb.clone());
        if i < gw.numel() {
            wu.data_mut()[i] += h;
            wd.data_mut()[i] -= h;
        } else {
            bu.data_mut()[i - gw.numel()] += h;
            bd.data_mut()[i - gw.numel()] -= h;
        }
        numeric.push((surrogate(&wu, &bu) - surrogate(&wd, &bd)) / (2.0 * h));
    }
    let rel = relative_error(&analytic, &numeric, 1e-12);

    // Zero noise: training forward equals inference forward bit for bit.
    let mut bitwise = true;
    for seed in 0..20u64 {
        let xi = random(&[65, 8], 100 + seed);
        let run = |sel: Selection<'_, f64>| -> Result<(Vec<f64>, Vec<usize>), String> {
            let mut g = Graph::new();
            let p = ids.bind(&mut g, &store);
            let t = g.leaf(xi.clone());
            let fm = FeatureMap { tokens: t, height: 8, width: 8, extra: 1 };
            let out = dge_block(&mut g, fm, &p, 2, &part, sel).map_err(err)?;
            Ok((g.value(out.y.tokens).data().to_vec(), out.decision.theta))
        };
        let (yi, ti) = run(Selection::Infer)?;
        let (yt, tt) = run(Selection::Noise { noise: Tensor::zeros([4, 3]), tau })?;
        let same = ti == tt && yi.iter().zip(&yt).all(|(u, v)| u.to_bits() == v.to_bits());
        bitwise &= same;
    }
    let detail = format!("gate gradient vs surrogate rel {rel:.1e} (< 1e-4); zero-noise train == infer bitwise: {bitwise}");
    if rel < 1e-4 && bitwise {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 3

fn identity_routing() -> Check {
    let set = GranularitySet::new(vec![1], Some(4)).map_err(err)?;
    let part = partition(8, 8, 16, &set).map_err(err)?;
    let mut store = ParamStore::<f32>::new();
    let ids = BlockParams::init(&mut store, "b", 16, 64, 1, &mut RngStream::new(71, 0)).map_err(err)?;
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let extra = (i % 2) as usize;
        let x: Tensor<f32> = normal_tensor(&mut RngStream::new(72, i), &[extra + 64, 16], 1.0);
        let mut g = Graph::new();
        let p = ids.bind(&mut g, &store);
        let xv = g.leaf(x.clone());
        let fm = FeatureMap { tokens: xv, height: 8, width: 8, extra };
        let out = dge_block(&mut g, fm, &p, 4, &part, Selection::Infer).map_err(err)?;
        let enc = vanilla_encoder(&mut g, xv, xv, &p, 4).map_err(err)?;
        let (y, e) = (g.value(out.y.tokens), g.value(enc));
        for r in 0..extra + 64 {
            for c in 0..16 {
                let want = if r < extra { e.row(r)[c] } else { e.row(r)[c] + x.row(r)[c] };
                worst = worst.max((y.row(r)[c] - want).abs() as f64);
            }
        }
    }
    let detail = format!("max |dge_block - (vanilla_encoder + x)| = {worst:.1e} over 100 inputs (<= 1e-6)");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 4

fn beta_of(costs: &[LayerCost], part: &RegionPartition, thetas: &[Vec<usize>]) -> Result<f64, String> {
    let mut g = Graph::<f64>::new();
    let decisions: Vec<GatingDecision<f64>> = thetas
        .iter()
        .map(|t| GatingDecision::forced(Tensor::zeros([part.num_regions(), part.granularities().k()]), t.clone()))
        .collect::<dge_core::Result<_>>()
        .map_err(err)?;
    let pairs: Vec<(&LayerCost, &GatingDecision<f64>)> = costs.iter().zip(&decisions).collect();
    let beta = complexity_ratio(&mut g, &pairs, part).map_err(err)?;
    Ok(g.value(beta).item())
}

fn beta_closed_forms() -> Check {
    let config = ModelConfig::default();
    let model = VitModel::<f64>::new(config.clone(), &mut RngStream::new(81, 0)).map_err(err)?;
    let part = model.partition();
    if part.grid() != (2, 2) || part.region_size() != 4 || config.grid() != 8 {
        return Err(format!("unexpected partition {:?}", part.grid()));
    }
    let (costs, _) = model_costs(&config, part);
    let layers = config.encoder.layers;
    let image = random(&[1, 32, 32], 82).cast::<f64>();
    let cases = [(vec![2usize; 4], 0.0625), (vec![0; 4], 1.0), (vec![0, 0, 1, 1], 0.625)];
    let mut exact = Vec::new();
    for (theta, want) in &cases {
        let thetas = vec![theta.clone(); layers];
        let from_graph = beta_of(&costs, part, &thetas)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let out = model.forward(&mut g, &bound, &image, Routing::Forced(&thetas), None).map_err(err)?;
        let from_report = flops_report(&config, part, &out.layers).map_err(err)?.beta;
        exact.push(from_graph == *want && from_report == *want);
    }

    let k = part.granularities().k();
    let mut strict = true;
    let mut checked = 0;
    for code in 0..k.pow(4) {
        let theta: Vec<usize> = (0..4).map(|r| (code / k.pow(r as u32)) % k).collect();
        let base = ratio_value(&costs[..1], &[query_count(&theta, part)]).map_err(err)?;
        for r in 0..4 {
            if theta[r] + 1 < k {
                let mut coarser = theta.clone();
                coarser[r] += 1;
                let b = ratio_value(&costs[..1], &[query_count(&coarser, part)]).map_err(err)?;
                strict &= b < base;
                checked += 1;
            }
        }
    }
    let mut rng = RngStream::new(83, 0);
    for _ in 0..200 {
        let thetas: Vec<Vec<usize>> = (0..layers).map(|_| (0..4).map(|_| rng.below(k)).collect()).collect();
        let base = beta_of(&costs, part, &thetas)?;
        let (l, r) = (rng.below(layers), rng.below(4));
        if thetas[l][r] + 1 < k {
            let mut coarser = thetas.clone();
            coarser[l][r] += 1;
            strict &= beta_of(&costs, part, &coarser)? < base;
            checked += 1;
        }
    }
    let detail = format!("closed forms 0.0625/1/0.625 exact: {exact:?}; strict decrease on {checked} coarsenings: {strict}");
    if exact.iter().all(|&e| e) && strict {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7

fn gumbel_law() -> Check {
    let n = 100_000;
    let logits_row = [0.4, -1.1, 1.3, 0.0];
    let k = logits_row.len();
    let data: Vec<f64> = (0..n).flat_map(|_| logits_row).collect();
    let mut g = Graph::<f64>::new();
    let logits = g.variable(Tensor::new([n, k], data).map_err(err)?);
    let decision = select_training(&mut g, logits, &mut RngStream::new(91, 0), 0.5).map_err(err)?;
    let mut counts = vec![0usize; k];
    for &t in &decision.theta {
        counts[t] += 1;
    }
    let m = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits_row.iter().map(|v| (v - m).exp()).sum();
    let chi2: f64 = (0..k)
        .map(|i| {
            let expect = n as f64 * (logits_row[i] - m).exp() / z;
            (counts[i] as f64 - expect).powi(2) / expect
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new((k - 1) as f64).map_err(|e| e.to_string())?.cdf(chi2);
    let detail = format!("counts {counts:?}, chi2 {chi2:.2} on {} dof, p = {p_value:.3} (> 0.01)", k - 1);
    if p_value > 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- trained models

struct Run {
    outcome: TrainOutcome,
    elapsed: Duration,
}

struct Trained {
    root: tempfile::TempDir,
    runs: Vec<(String, Run)>,
}

impl Trained {
    fn new() -> Self {
        Self {
            root: tempfile::tempdir().expect("tempdir"),
            runs: Vec::new(),
        }
    }

    fn get(&mut self, name: &str, gamma: f64, phis: Vec<usize>) -> Result<&Run, String> {
        if let Some(i) = self.runs.iter().position(|(n, _)| n == name) {
            return Ok(&self.runs[i].1);
        }
        let mut cfg = RunConfig::default();
        cfg.model.encoder.budget = gamma;
        cfg.model.encoder.granularities = phis;
        cfg.out = self.root.path().join(name);
        cfg.log_wall_clock = false;
        let t0 = Instant::now();
        let outcome = train::<f32>(&cfg).map_err(err)?;
        let elapsed = t0.elapsed();
        eprintln!(
            "  trained {name}: {} steps in {:.0} s, final val accuracy {:.4}, β {:.4}",
            outcome.steps,
            elapsed.as_secs_f64(),
            outcome.final_val_accuracy,
            outcome.final_val_beta
        );
        self.runs.push((name.to_string(), Run { outcome, elapsed }));
        Ok(&self.runs.last().expect("just pushed").1)
    }

    fn budget(&mut self, gamma: f64) -> Result<&Run, String> {
        self.get(&format!("gamma{gamma}"), gamma, vec![1, 2, 4])
    }

    fn dense(&mut self) -> Result<&Run, String> {
        self.get("dense", 1.0, vec![1])
    }

    fn model(&mut self) -> Result<VitModel<f32>, String> {
        let path = self.budget(0.5)?.outcome.final_checkpoint.clone();
        VitModel::load(&path).map_err(err)
    }
}

fn validation() -> Result<Vec<dge_core::harness::Sample>, String> {
    let mut cfg = RunConfig::default();
    cfg.validate().map_err(err)?;
    Ok(make_dataset(&cfg.dataset).map_err(err)?.val)
}

// ---------------------------------------------------------------- 5

fn budget_control(t: &mut Trained) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut total = Duration::ZERO;
    for gamma in [0.25, 0.5, 0.75] {
        let run = t.budget(gamma)?;
        let beta = run.outcome.final_val_beta;
        ok &= (beta - gamma).abs() <= 0.1;
        total += run.elapsed;
        lines.push(format!("γ {gamma}: β {beta:.3}"));
    }
    ok &= total < Duration::from_secs(15 * 60);
    let detail = format!("{} (|β−γ| <= 0.1); training {:.0} s (< 900 s)", lines.join(", "), total.as_secs_f64());
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 6

fn accuracy_retention(t: &mut Trained) -> Check {
    let (dense_acc, dense_time) = {
        let r = t.dense()?;
        (r.outcome.final_val_accuracy, r.elapsed)
    };
    let r = t.budget(0.5)?;
    let (acc, beta, time) = (r.outcome.final_val_accuracy, r.outcome.final_val_beta, r.elapsed);
    let total = dense_time + time;
    let detail = format!(
        "dense {:.2}%, γ=0.5 {:.2}% (gap {:.2} pts <= 3) at β {:.3} (<= 0.65); training {:.0} s (< 600 s)",
        100.0 * dense_acc,
        100.0 * acc,
        100.0 * (dense_acc - acc),
        beta,
        total.as_secs_f64()
    );
    if dense_acc - acc <= 0.03 && beta <= 0.65 && total < Duration::from_secs(600) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 8

fn redundancy(t: &mut Trained) -> Check {
    let model = t.model()?;
    let val = validation()?;
    let profile = redundancy_profile(&model, &val).map_err(err)?;
    let thresholds = [-1.0, 0.0, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 1.01];
    let sweep = threshold_sweep(&model, &val, &thresholds).map_err(err)?;
    let base = sweep.iter().find(|p| p.threshold > 1.0).map(|p| p.accuracy).ok_or("no baseline point")?;
    let monotone = sweep.windows(2).all(|w| {
        w[0].threshold < w[1].threshold
            && w[1].replaced_frac <= w[0].replaced_frac
            && w[1].complexity_ratio >= w[0].complexity_ratio
    });
    let good = sweep
        .iter()
        .filter(|p| p.complexity_ratio <= 0.8 && base - p.accuracy < 0.02)
        .max_by(|a, b| b.complexity_ratio.total_cmp(&a.complexity_ratio));
    let detail = format!(
        "PCC > 0.8 share {:.1}% (> 50%); sweep monotone: {monotone}; best point {}",
        100.0 * profile.above_0_8,
        match good {
            Some(p) => format!(
                "thr {} cuts {:.1}% at accuracy drop {:.2} pts",
                p.threshold,
                100.0 * (1.0 - p.complexity_ratio),
                100.0 * (base - p.accuracy)
            ),
            None => "none with >= 20% cut and < 2 pts drop".into(),
        }
    );
    if profile.above_0_8 > 0.5 && monotone && good.is_some() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 9

fn routing_localization(t: &mut Trained) -> Check {
    let model = t.model()?;
    let report = localization(&model, &validation()?).map_err(err)?;
    let detail = format!(
        "finest share inside {:.3}, outside {:.3}, margin {:.3} (>= 0.2)",
        report.inside, report.outside, report.margin
    );
    if report.margin >= 0.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 10

fn accounting(t: &mut Trained) -> Check {
    let mut worst: f64 = 0.0;
    let mut routings = 0;
    for phis in [vec![1, 2, 4], vec![0, 1, 2, 4]] {
        let mut config = ModelConfig::default();
        config.encoder.granularities = phis;
        let model = VitModel::<f32>::new(config.clone(), &mut RngStream::new(101, 0)).map_err(err)?;
        let part = model.partition();
        let k = part.granularities().k();
        let mut rng = RngStream::new(102, 0);
        let image = random(&[1, 32, 32], 103).cast::<f32>();
        for _ in 0..10 {
            let thetas: Vec<Vec<usize>> = (0..config.encoder.layers)
                .map(|_| (0..part.num_regions()).map(|_| rng.below(k)).collect())
                .collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let out = model.forward(&mut g, &bound, &image, Routing::Forced(&thetas), None).map_err(err)?;
            let report = flops_report(&config, part, &out.layers).map_err(err)?;
            let counted = 2.0 * g.macs() as f64;
            worst = worst.max((report.total_flops - counted).abs() / counted);
            routings += 1;
        }
    }

    let model = t.model()?;
    let val = validation()?;
    let images: Vec<(String, Tensor<f32>)> =
        val.iter().take(16).enumerate().map(|(i, s)| (format!("val{i}"), s.image(32))).collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = export_heatmaps(&model, &images, dir.path()).map_err(err)?;
    let mut matched = 0;
    let mut mismatched = 0;
    for (i, s) in val.iter().take(16).enumerate() {
        let (_, report) = infer_one(&model, s).map_err(err)?;
        for f in files.iter().filter(|f| f.image == format!("val{i}")) {
            let psi = psi_from_heatmap(&f.pgm, model.partition()).map_err(err)?;
            if psi == report.layers[f.layer].psi {
                matched += 1;
            } else {
                mismatched += 1;
            }
        }
    }
    let detail = format!(
        "analytic vs counted FLOPs max rel {worst:.1e} over {routings} routings (< 1%); heat-map ψ equal on {matched}/{} maps",
        matched + mismatched
    );
    if worst < 0.01 && mismatched == 0 && matched > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 11

fn reproducibility() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<PathBuf, String> {
        let mut cfg = RunConfig::default();
        cfg.dataset.train = 256;
        cfg.dataset.val = 64;
        cfg.epochs = 2;
        cfg.seed = 11;
        cfg.log_wall_clock = false;
        cfg.out = root.path().join(name);
        train::<f32>(&cfg).map_err(err)?;
        Ok(cfg.out)
    };
    let (a, b) = (run("a")?, run("b")?);
    let files = ["final.json", "final.bin", "best.json", "best.bin", "metrics.jsonl"];
    let same = |f: &str| -> Result<bool, String> {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
        Ok(read(&a)? == read(&b)?)
    };
    let mut differing = Vec::new();
    for f in files {
        if !same(f)? {
            differing.push(f);
        }
    }
    if differing.is_empty() {
        Ok(format!("{} files byte-identical across two runs", files.len()))
    } else {
        Err(format!("differing files: {differing:?}"))
    }
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut trained = Trained::new();
    let criteria: Vec<(usize, &str, Box<dyn FnMut(&mut Trained) -> Check>)> = vec![
        (1, "gradient integrity", Box::new(|_| gradient_integrity())),
        (2, "straight-through estimator", Box::new(|_| ste_correctness())),
        (3, "identity routing equivalence", Box::new(|_| identity_routing())),
        (4, "complexity ratio closed forms", Box::new(|_| beta_closed_forms())),
        (5, "budget control", Box::new(budget_control)),
        (6, "accuracy retention", Box::new(accuracy_retention)),
        (7, "Gumbel-max law", Box::new(|_| gumbel_law())),
        (8, "redundancy probe", Box::new(redundancy)),
        (9, "routing localization", Box::new(routing_localization)),
        (10, "accounting consistency", Box::new(accounting)),
        (11, "reproducibility", Box::new(|_| reproducibility())),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, mut check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let result = check(&mut trained);
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
