//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time budget.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use infoseg::convcrf::{crf_refine, CrfConfig};
use infoseg::eval::{argmax_prediction, miou, ConfusionMatrix};
use infoseg::finetune::{
    fit, PromptTokens, Prompts, ToyModel, ToyModelConfig, TrainConfig, TrainExample, TrainScope,
};
use infoseg::heatmap::{per_layer_probmaps, ImageAttention, PromptAttention};
use infoseg::infoscore::{entropy, info_score, ENTROPY_FLOOR};
use infoseg::pipeline::{
    confusion, fit_few_shot, rank_dataset, segment_images, support_split, top_layers,
    AttentionSource, FewShotConfig, PipelineConfig, SupportSplit,
};
use infoseg::rescore::{ensemble, ClassScoreVector};
use infoseg::synth::{make_fixture, FixtureSpec};
use infoseg::tensor_io::{
    decode_attention, decode_mask, decode_raster, encode_attention, encode_mask, encode_raster,
    load_manifest, read_mask, read_raster, PromptManifest, ATNS_HEADER_LEN,
};
use infoseg::{AttentionStack, LabelMask, ProbMap, RasterImage};
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

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn prob_map(n: usize, h: usize, w: usize, pixel: impl Fn(usize) -> Vec<f64>) -> ProbMap {
    let mut values = vec![0.0; n * h * w];
    for i in 0..h * w {
        for (c, p) in pixel(i).into_iter().enumerate() {
            values[c * h * w + i] = p;
        }
    }
    ProbMap::new(n, h, w, values).unwrap()
}

fn fixture(spec: &FixtureSpec) -> (tempfile::TempDir, PromptManifest) {
    let dir = tempfile::tempdir().unwrap();
    let path = make_fixture(spec, dir.path()).unwrap();
    let manifest = load_manifest(path).unwrap();
    (dir, manifest)
}

fn no_crf() -> PipelineConfig {
    PipelineConfig {
        crf: None,
        ..PipelineConfig::default()
    }
}

// ---------------------------------------------------------------------------

fn entropy_suite() -> Outcome {
    for n in [2usize, 21, 171] {
        let h = entropy(&vec![1.0 / n as f64; n]).map_err(|e| e.to_string())?;
        let expected = (n as f64).ln();
        ensure((h - expected).abs() <= 1e-9, || {
            format!("uniform N={n}: {h} vs {expected}")
        })?;
        for hot in [0, n - 1] {
            let mut one_hot = vec![0.0; n];
            one_hot[hot] = 1.0;
            let h = entropy(&one_hot).map_err(|e| e.to_string())?;
            ensure(h == 0.0, || format!("one-hot N={n}: {h}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=200);
        let p = random_simplex(&mut rng, n);
        let h = entropy(&p).map_err(|e| e.to_string())?;
        ensure((0.0..=(n as f64).ln()).contains(&h), || {
            format!("H={h} for N={n}")
        })?;
    }
    Ok("uniform/one-hot exact, 10^4 random vectors bounded".into())
}

fn infoscore_oracle() -> Outcome {
    for seed in 0..10 {
        let spec = FixtureSpec {
            n_classes: 8,
            n_images: 32,
            grid: 16,
            alpha: FixtureSpec::decreasing_alpha(6),
            max_regions: 3,
            seed,
            ..FixtureSpec::default()
        };
        let (_dir, manifest) = fixture(&spec);
        let ranking = rank_dataset(&manifest, &no_crf(), AttentionSource::Files)
            .map_err(|e| e.to_string())?;
        ensure(ranking.ranking == (0..6).collect::<Vec<_>>(), || {
            format!("seed {seed}: ranking {:?}", ranking.ranking)
        })?;
    }
    Ok("ranking 0..5 on 10 seeds (L=6, N=8, 32 images, P=16)".into())
}

fn infoscore_edges() -> Outcome {
    let n = 5;
    let uniform: Vec<ProbMap> = (0..4).map(|_| ProbMap::uniform(n, 6, 6)).collect();
    let s = info_score(0, &uniform)
        .map_err(|e| e.to_string())?
        .info_score;
    ensure((s - 1.0).abs() <= 1e-6, || format!("uniform score {s}"))?;

    let one_hot = |class: usize| {
        prob_map(n, 6, 6, move |_| {
            let mut p = vec![0.0; n];
            p[class] = 1.0;
            p
        })
    };
    let constant: Vec<ProbMap> = (0..4).map(|_| one_hot(2)).collect();
    let s = info_score(0, &constant)
        .map_err(|e| e.to_string())?
        .info_score;
    ensure(s == 0.0, || format!("constant one-hot score {s}"))?;

    let distinct: Vec<ProbMap> = (0..n).map(one_hot).collect();
    let s = info_score(0, &distinct)
        .map_err(|e| e.to_string())?
        .info_score;
    let expected = (n as f64).ln() / ENTROPY_FLOOR;
    ensure((s - expected).abs() <= expected * 1e-12, || {
        format!("distinct one-hot score {s} vs {expected}")
    })?;
    Ok(format!("uniform 1, constant 0, distinct ln{n}/1e-8"))
}

/// Straight-line reference: head max, token mean, prompt max, class softmax.
fn reference_probmaps(classes: &[Vec<(AttentionStack, Vec<bool>)>]) -> Vec<Vec<f64>> {
    let first = &classes[0][0].0;
    let (layers, grid) = (first.layers(), first.grid());
    let n = classes.len();
    let mut out = Vec::new();
    for l in 0..layers {
        let mut raw = vec![vec![0.0; grid * grid]; n];
        for (c, prompts) in classes.iter().enumerate() {
            for (pi, (stack, include)) in prompts.iter().enumerate() {
                for r in 0..grid {
                    for col in 0..grid {
                        let mut sum = 0.0;
                        let mut count = 0.0;
                        for t in 0..stack.tokens() {
                            if !include[t] {
                                continue;
                            }
                            let mut best = f64::NEG_INFINITY;
                            for h in 0..stack.heads() {
                                best = best.max(f64::from(stack.get(l, h, t, r, col)));
                            }
                            sum += best;
                            count += 1.0;
                        }
                        let v = sum / count;
                        let slot = &mut raw[c][r * grid + col];
                        *slot = if pi == 0 { v } else { slot.max(v) };
                    }
                }
            }
        }
        let mut probs = vec![0.0; n * grid * grid];
        for i in 0..grid * grid {
            let max = (0..n).map(|c| raw[c][i]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|c| (raw[c][i] - max).exp()).sum();
            for c in 0..n {
                probs[c * grid * grid + i] = (raw[c][i] - max).exp() / total;
            }
        }
        out.push(probs);
    }
    out
}

fn heatmap_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let layers = rng.gen_range(1..=3);
        let heads = rng.gen_range(1..=4);
        let tokens = rng.gen_range(1..=5);
        let grid = rng.gen_range(1..=8);
        let n = rng.gen_range(2..=6);
        let mut classes = Vec::new();
        for _ in 0..n {
            let prompts = (0..rng.gen_range(1..=2))
                .map(|_| {
                    let values = (0..layers * heads * tokens * grid * grid)
                        .map(|_| rng.gen::<f32>() * 2.0)
                        .collect();
                    let stack = AttentionStack::new(layers, heads, tokens, grid, values).unwrap();
                    let mut include: Vec<bool> = (0..tokens).map(|_| rng.gen_bool(0.6)).collect();
                    include[rng.gen_range(0..tokens)] = true;
                    (stack, include)
                })
                .collect::<Vec<_>>();
            classes.push(prompts);
        }
        let attn = ImageAttention {
            classes: classes
                .iter()
                .map(|prompts| {
                    prompts
                        .iter()
                        .map(|(stack, include)| PromptAttention {
                            stack: stack.clone(),
                            include_mask: include.clone(),
                        })
                        .collect()
                })
                .collect(),
        };
        let got = per_layer_probmaps(&attn).map_err(|e| e.to_string())?;
        let expected = reference_probmaps(&classes);
        for (g, e) in got.iter().zip(&expected) {
            for (a, b) in g.values().iter().zip(e) {
                worst = worst.max((a - b).abs());
            }
        }
        ensure(worst <= 1e-6, || {
            format!("instance {instance}: deviation {worst}")
        })?;
    }
    Ok(format!("100 instances, max deviation {worst:.1e}"))
}

/// Brute-force windowed mean field, pixel by pixel.
fn reference_crf(prob: &ProbMap, image: &RasterImage, cfg: &CrfConfig) -> Vec<f64> {
    let (n, h, w) = (prob.n_classes(), prob.height(), prob.width());
    let r = (cfg.kernel_size / 2) as isize;
    let unary: Vec<Vec<f64>> = (0..h * w)
        .map(|i| (0..n).map(|c| (prob.plane(c)[i] + 1e-8).ln()).collect())
        .collect();
    let softmax = |z: &[f64]| -> Vec<f64> {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let mut q: Vec<Vec<f64>> = unary.iter().map(|u| softmax(u)).collect();
    for _ in 0..cfg.iterations {
        let mut next = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = (y * w as isize + x) as usize;
                let ci = image.unit_rgb(y as usize, x as usize);
                let mut message = vec![0.0; n];
                let mut mass = 0.0;
                for yy in (y - r)..=(y + r) {
                    for xx in (x - r)..=(x + r) {
                        if (yy, xx) == (y, x)
                            || yy < 0
                            || xx < 0
                            || yy >= h as isize
                            || xx >= w as isize
                        {
                            continue;
                        }
                        let j = (yy * w as isize + xx) as usize;
                        let cj = image.unit_rgb(yy as usize, xx as usize);
                        let d2 = ((yy - y).pow(2) + (xx - x).pow(2)) as f64;
                        let c2: f64 = (0..3).map(|k| (ci[k] - cj[k]).powi(2)).sum();
                        let k = cfg.w_app
                            * (-d2 / (2.0 * cfg.theta_alpha.powi(2))
                                - c2 / (2.0 * cfg.theta_beta.powi(2)))
                            .exp()
                            + cfg.w_smooth * (-d2 / (2.0 * cfg.theta_gamma.powi(2))).exp();
                        mass += k;
                        for c in 0..n {
                            message[c] += k * q[j][c];
                        }
                    }
                }
                let norm = if cfg.normalize_kernel && mass > 0.0 {
                    mass
                } else {
                    1.0
                };
                let logits: Vec<f64> = (0..n)
                    .map(|c| unary[i][c] + cfg.compat_weight * message[c] / norm)
                    .collect();
                next.push(softmax(&logits));
            }
        }
        q = next;
    }
    let mut out = vec![0.0; n * h * w];
    for (i, p) in q.iter().enumerate() {
        for c in 0..n {
            out[c * h * w + i] = p[c];
        }
    }
    out
}

fn on_simplex(prob: &ProbMap) -> bool {
    let plane = prob.height() * prob.width();
    (0..plane).all(|i| {
        let s: f64 = (0..prob.n_classes()).map(|c| prob.plane(c)[i]).sum();
        (s - 1.0).abs() <= 1e-9 && (0..prob.n_classes()).all(|c| prob.plane(c)[i] >= 0.0)
    })
}

/// First column whose argmax is class 1, per row.
fn boundary_columns(pred: &LabelMask) -> Vec<usize> {
    (0..pred.height)
        .map(|y| {
            (0..pred.width)
                .find(|&x| pred.get(y, x) == 1)
                .unwrap_or(pred.width)
        })
        .collect()
}

fn convcrf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let n = rng.gen_range(2..=5);
        let pixels: Vec<Vec<f64>> = (0..64).map(|_| random_simplex(&mut rng, n)).collect();
        let prob = prob_map(n, 8, 8, |i| pixels[i].clone());
        let image = RasterImage::new(8, 8, (0..8 * 8 * 3).map(|_| rng.gen()).collect()).unwrap();
        let cfg = CrfConfig {
            kernel_size: 3,
            iterations: 2,
            theta_beta: rng.gen_range(0.05..0.5),
            compat_weight: rng.gen_range(0.5..3.0),
            normalize_kernel: instance % 5 != 0,
            ..CrfConfig::default()
        };
        let got = crf_refine(&prob, &image, &cfg).map_err(|e| e.to_string())?;
        let expected = reference_crf(&prob, &image, &cfg);
        for (a, b) in got.values().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-5, || {
            format!("instance {instance}: deviation {worst}")
        })?;
        for iterations in 0..=cfg.iterations {
            let q = crf_refine(&prob, &image, &CrfConfig { iterations, ..cfg })
                .map_err(|e| e.to_string())?;
            ensure(on_simplex(&q), || {
                format!("instance {instance}: off simplex at {iterations}")
            })?;
        }
    }

    // Colour edge between columns 15 and 16, probability edge blurred around
    // column 18.
    let (h, w, edge) = (24, 32, 16);
    let mut image = RasterImage::filled(h, w, [20, 20, 20]);
    for y in 0..h {
        for x in edge..w {
            image.set_pixel(y, x, [235, 235, 235]);
        }
    }
    let prob = prob_map(2, h, w, |i| {
        let x = (i % w) as f64;
        let p1 = 1.0 / (1.0 + (-(x - 17.5) / 1.5).exp());
        vec![1.0 - p1, p1]
    });
    let before = boundary_columns(&argmax_prediction(&prob));
    ensure(before.iter().all(|&b| b >= edge + 2), || {
        format!("fixture boundary {before:?}")
    })?;
    let refined = crf_refine(&prob, &image, &CrfConfig::default()).map_err(|e| e.to_string())?;
    let after = boundary_columns(&argmax_prediction(&refined));
    ensure(after.iter().all(|&b| b.abs_diff(edge) <= 1), || {
        format!("boundary after CRF {after:?}, colour edge {edge}")
    })?;
    Ok(format!(
        "50 instances max deviation {worst:.1e}; boundary {} -> {} (edge {edge})",
        before[0], after[0]
    ))
}

fn gradient_check() -> Outcome {
    let vocab = 7;
    let prompt = |words: &[usize]| {
        let mut tokens = vec![0];
        tokens.extend_from_slice(words);
        tokens.push(1);
        let mut include = vec![true; tokens.len()];
        include[0] = false;
        *include.last_mut().unwrap() = false;
        PromptTokens { tokens, include }
    };
    let prompts = Prompts {
        classes: vec![prompt(&[2, 3]), prompt(&[2, 4]), prompt(&[5, 6])],
    };
    let config = |seed| ToyModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        grid: 4,
        seed,
    };
    let example = |rng: &mut ChaCha8Rng| {
        let image = RasterImage::new(8, 8, (0..8 * 8 * 3).map(|_| rng.gen()).collect()).unwrap();
        let mut mask = LabelMask::filled(4, 4, 0);
        for v in mask.data.iter_mut() {
            *v = rng.gen_range(0..3);
        }
        TrainExample { image, mask }
    };
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ToyModel::new(config(seed), vocab).map_err(|e| e.to_string())?;
        model
            .set_trainable(&prompts, &[0, 1], TrainScope::EmbeddingsAndLayers)
            .map_err(|e| e.to_string())?;
        let ex = example(&mut rng);
        let top_k = [0, 1];
        let (_, grads) = model
            .backward(&ex.image, &prompts, &ex.mask, &top_k, 255)
            .map_err(|e| e.to_string())?;
        let coords: Vec<(usize, usize)> = model
            .params()
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.data.len()).map(move |i| (t, i)))
            .filter(|&(t, i)| model.is_trainable(t, i))
            .collect();
        let choices = |m: &ToyModel| {
            let f = m.image_features(&ex.image).unwrap();
            m.forward(&f, &prompts, 2).unwrap().head_choices()
        };
        let base = choices(&model);
        let mut sampled = 0;
        while sampled < 50 {
            let (t, i) = coords[rng.gen_range(0..coords.len())];
            let original = model.params()[t].data[i];
            model.params_mut()[t].data[i] = original + eps;
            let plus = model
                .loss(&ex.image, &prompts, &ex.mask, &top_k, 255)
                .unwrap();
            let plus_choice = choices(&model);
            model.params_mut()[t].data[i] = original - eps;
            let minus = model
                .loss(&ex.image, &prompts, &ex.mask, &top_k, 255)
                .unwrap();
            let minus_choice = choices(&model);
            model.params_mut()[t].data[i] = original;
            if plus_choice != base || minus_choice != base {
                skipped += 1;
                ensure(skipped < 100, || "too many head-max ties".into())?;
                continue;
            }
            sampled += 1;
            let fd = (plus - minus) / (2.0 * eps);
            let g = grads.tensors[t].as_ref().unwrap()[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            ensure(rel <= 1e-4, || {
                format!("seed {seed} tensor {t}[{i}]: {g} vs {fd}")
            })?;
        }

        // Frozen parameters must be bit-identical after training.
        let mut frozen_model = model.clone();
        frozen_model
            .set_trainable(&prompts, &[1], TrainScope::EmbeddingsAndLayers)
            .map_err(|e| e.to_string())?;
        let hash = |m: &ToyModel| {
            let mut hasher = DefaultHasher::new();
            for (t, p) in m.params().iter().enumerate() {
                for (i, v) in p.data.iter().enumerate() {
                    if !m.is_trainable(t, i) {
                        (t, i, v.to_bits()).hash(&mut hasher);
                    }
                }
            }
            hasher.finish()
        };
        let before = hash(&frozen_model);
        let examples: Vec<_> = (0..2).map(|_| example(&mut rng)).collect();
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 100,
            batch_size: 2,
            seed,
            ..TrainConfig::default()
        };
        let report =
            fit(&mut frozen_model, &examples, &prompts, &top_k, &cfg).map_err(|e| e.to_string())?;
        ensure(report.steps == 100, || format!("{} steps", report.steps))?;
        ensure(hash(&frozen_model) == before, || {
            format!("seed {seed}: frozen tensors changed")
        })?;
    }
    Ok(format!(
        "{checked} coordinates over 10 seeds, max rel err {worst:.1e} ({skipped} tie-adjacent skipped); frozen hash stable"
    ))
}

fn support_example(
    manifest: &PromptManifest,
    image: usize,
    class: usize,
    grid: usize,
) -> TrainExample {
    let entry = &manifest.images[image];
    let mask = read_mask(entry.mask_path.as_ref().unwrap()).unwrap();
    TrainExample {
        image: read_raster(&entry.raster_path).unwrap(),
        mask: infoseg::pipeline::support_mask(&mask, class, manifest.background_class())
            .resample_nearest(grid, grid),
    }
}

fn pixel_accuracy(model: &ToyModel, prompts: &Prompts, ex: &TrainExample, top_k: &[usize]) -> f64 {
    let raw = model.heatmaps(&ex.image, prompts).unwrap();
    let prob = ensemble(&raw, top_k, &ClassScoreVector::ones(prompts.n_classes())).unwrap();
    let pred = argmax_prediction(&prob);
    let mut cm = ConfusionMatrix::new(prompts.n_classes());
    cm.accumulate(&pred, &ex.mask).unwrap();
    cm.trace() as f64 / cm.total() as f64
}

fn overfit_one_shot() -> Outcome {
    let mut accuracies = Vec::new();
    for seed in 0..5 {
        let spec = FixtureSpec {
            seed,
            ..FixtureSpec::default()
        };
        let (_dir, manifest) = fixture(&spec);
        let split = support_split(&manifest, 1, seed).map_err(|e| e.to_string())?;
        let one = SupportSplit {
            support: vec![split.support[0]],
            held_out: Vec::new(),
        };
        let few_shot = FewShotConfig {
            train: TrainConfig {
                lr: 2e-4,
                epochs: 200,
                ..TrainConfig::default()
            },
            ..FewShotConfig::default()
        };
        let run =
            fit_few_shot(&manifest, &one, &no_crf(), &few_shot, seed).map_err(|e| e.to_string())?;
        ensure(run.report.steps <= 200, || {
            format!("{} steps", run.report.steps)
        })?;
        let (image, class) = one.support[0];
        let ex = support_example(&manifest, image, class, run.checkpoint.model.config().grid);
        let acc = pixel_accuracy(
            &run.checkpoint.model,
            &run.prompts,
            &ex,
            &run.checkpoint.top_k,
        );
        ensure(acc >= 0.95, || {
            format!("seed {seed}: accuracy {acc:.3} on the support example")
        })?;
        accuracies.push(acc);
    }

    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let spec = FixtureSpec {
            seed,
            n_images: 12,
            noise: 1.0,
            alpha: FixtureSpec::decreasing_alpha(6)
                .iter()
                .map(|a| a * 0.2)
                .collect(),
            ..FixtureSpec::default()
        };
        let (_dir, manifest) = fixture(&spec);
        let cfg = no_crf();
        let split = support_split(&manifest, 1, seed).map_err(|e| e.to_string())?;
        let ranking =
            rank_dataset(&manifest, &cfg, AttentionSource::Files).map_err(|e| e.to_string())?;
        let layers = top_layers(&ranking, cfg.top_k).map_err(|e| e.to_string())?;
        let preds = segment_images(
            &manifest,
            &split.held_out,
            &cfg,
            AttentionSource::Files,
            &layers,
        )
        .map_err(|e| e.to_string())?;
        let free = miou(&confusion(&manifest, &split.held_out, &preds).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .miou;
        let few_shot = FewShotConfig {
            train: TrainConfig {
                epochs: 200,
                ..TrainConfig::default()
            },
            ..FewShotConfig::default()
        };
        let run =
            fit_few_shot(&manifest, &split, &cfg, &few_shot, seed).map_err(|e| e.to_string())?;
        let source = AttentionSource::Model(&run.checkpoint.model, &run.prompts);
        let preds = segment_images(
            &manifest,
            &split.held_out,
            &cfg,
            source,
            &run.checkpoint.top_k,
        )
        .map_err(|e| e.to_string())?;
        let tuned =
            miou(&confusion(&manifest, &split.held_out, &preds).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?
                .miou;
        if tuned > free {
            wins += 1;
        }
        pairs.push(format!("{free:.2}->{tuned:.2}"));
    }
    ensure(wins >= 4, || {
        format!("one-shot beat training-free in {wins}/5 seeds: {pairs:?}")
    })?;
    Ok(format!(
        "support accuracy min {:.3}; degraded fixture one-shot > training-free {wins}/5 [{}]",
        accuracies.iter().copied().fold(1.0, f64::min),
        pairs.join(" ")
    ))
}

fn false_positives(cm: &ConfusionMatrix) -> u64 {
    (0..cm.n_classes()).map(|c| cm.false_positives(c)).sum()
}

fn class_score_direction() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..5 {
        let spec = FixtureSpec {
            seed,
            n_classes: 5,
            n_images: 12,
            decoys: true,
            score_leak: 0.2,
            alpha: vec![0.6, 0.5, 0.4, 0.3],
            noise: 0.5,
            ..FixtureSpec::default()
        };
        let (_dir, manifest) = fixture(&spec);
        let all: Vec<usize> = (0..manifest.images.len()).collect();
        let run = |use_class_scores: bool| -> Result<ConfusionMatrix, String> {
            let cfg = PipelineConfig {
                use_class_scores,
                ..no_crf()
            };
            let ranking =
                rank_dataset(&manifest, &cfg, AttentionSource::Files).map_err(|e| e.to_string())?;
            let layers = top_layers(&ranking, cfg.top_k).map_err(|e| e.to_string())?;
            let preds = segment_images(&manifest, &all, &cfg, AttentionSource::Files, &layers)
                .map_err(|e| e.to_string())?;
            confusion(&manifest, &all, &preds).map_err(|e| e.to_string())
        };
        let with = run(true)?;
        let without = run(false)?;
        let (fp_with, fp_without) = (false_positives(&with), false_positives(&without));
        let m_with = miou(&with).map_err(|e| e.to_string())?.miou;
        let m_without = miou(&without).map_err(|e| e.to_string())?.miou;
        ensure(fp_with < fp_without && m_with > m_without, || {
            format!("seed {seed}: FP {fp_with} vs {fp_without}, mIoU {m_with:.3} vs {m_without:.3}")
        })?;
        lines.push(format!("FP {fp_without}->{fp_with}"));
    }
    Ok(format!("5/5 seeds [{}]", lines.join(", ")))
}

fn layer_count_direction() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..5 {
        let spec = FixtureSpec {
            seed,
            n_classes: 4,
            n_images: 12,
            noise: 1.0,
            alpha: vec![0.05, 0.3, 0.1, 0.35, 0.02, 0.08],
            ..FixtureSpec::default()
        };
        let (_dir, manifest) = fixture(&spec);
        let all: Vec<usize> = (0..manifest.images.len()).collect();
        let cfg = no_crf();
        let score = |layers: &[usize]| -> Result<f64, String> {
            let preds = segment_images(&manifest, &all, &cfg, AttentionSource::Files, layers)
                .map_err(|e| e.to_string())?;
            Ok(
                miou(&confusion(&manifest, &all, &preds).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?
                    .miou,
            )
        };
        let ranking =
            rank_dataset(&manifest, &cfg, AttentionSource::Files).map_err(|e| e.to_string())?;
        let top2 = score(&top_layers(&ranking, 2).map_err(|e| e.to_string())?)?;
        let top1 = score(&top_layers(&ranking, 1).map_err(|e| e.to_string())?)?;
        let singles = (0..6).map(|l| score(&[l])).collect::<Result<Vec<_>, _>>()?;
        let random = singles.iter().sum::<f64>() / singles.len() as f64;
        ensure(top2 >= top1 && top1 >= random, || {
            format!("seed {seed}: top-2 {top2:.3}, top-1 {top1:.3}, random layer {random:.3}")
        })?;
        lines.push(format!("{top2:.2}/{top1:.2}/{random:.2}"));
    }
    Ok(format!(
        "top-2/top-1/random-layer mIoU [{}]",
        lines.join(" ")
    ))
}

fn miou_hand_case() -> Outcome {
    let gt = LabelMask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMask::new(1, 4, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
    let report = miou(&cm).map_err(|e| e.to_string())?;
    ensure(report.miou == 7.0 / 12.0, || {
        format!("mIoU {}", report.miou)
    })?;
    ensure(report.per_class_iou[&0] == Some(0.5), || "IoU_0".into())?;
    ensure(report.per_class_iou[&1] == Some(2.0 / 3.0), || {
        "IoU_1".into()
    })?;
    Ok(format!("mIoU = {} = 7/12", report.miou))
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (l, h, t, p) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
            rng.gen_range(1..=6),
        );
        let values = (0..l * h * t * p * p).map(|_| rng.gen::<f32>()).collect();
        let stack = AttentionStack::new(l, h, t, p, values).unwrap();
        let bytes = encode_attention(&stack).map_err(|e| e.to_string())?;
        let back = decode_attention(&bytes).map_err(|e| e.to_string())?;
        ensure(
            encode_attention(&back).unwrap() == bytes && back == stack,
            || "ATNS".into(),
        )?;

        let (mh, mw) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let mask = LabelMask::new(mh, mw, (0..mh * mw).map(|_| rng.gen()).collect()).unwrap();
        let bytes = encode_mask(&mask);
        let back = decode_mask(&bytes).map_err(|e| e.to_string())?;
        ensure(back == mask && encode_mask(&back) == bytes, || "PGM".into())?;

        let raster =
            RasterImage::new(mh, mw, (0..mh * mw * 3).map(|_| rng.gen()).collect()).unwrap();
        let bytes = encode_raster(&raster);
        let back = decode_raster(&bytes).map_err(|e| e.to_string())?;
        ensure(back == raster && encode_raster(&back) == bytes, || {
            "PPM".into()
        })?;
    }

    let stack = AttentionStack::new(2, 2, 3, 4, vec![0.0625; 2 * 2 * 3 * 16]).unwrap();
    let good = encode_attention(&stack).unwrap();
    let mut corruptions = 0;
    for pos in 0..ATNS_HEADER_LEN {
        for value in 0..=255u8 {
            if value == good[pos] {
                continue;
            }
            let mut bad = good.clone();
            bad[pos] = value;
            ensure(decode_attention(&bad).is_err(), || {
                format!("ATNS byte {pos} = {value} accepted")
            })?;
            corruptions += 1;
        }
    }

    // PNM headers are text: a corrupted byte must either be rejected or, for
    // whitespace swaps, decode to the very same image.
    let mask = LabelMask::new(3, 5, (0..15).collect()).unwrap();
    let raster = RasterImage::new(3, 5, (0..45).collect()).unwrap();
    for (bytes, kind) in [(encode_mask(&mask), "PGM"), (encode_raster(&raster), "PPM")] {
        let header_len = bytes.len() - if kind == "PGM" { 15 } else { 45 };
        for pos in 0..header_len {
            for value in 0..=255u8 {
                if value == bytes[pos] {
                    continue;
                }
                let mut bad = bytes.clone();
                bad[pos] = value;
                let accepted = if kind == "PGM" {
                    decode_mask(&bad).map(|m| m == mask)
                } else {
                    decode_raster(&bad).map(|r| r == raster)
                };
                ensure(!matches!(accepted, Ok(false)), || {
                    format!("{kind} byte {pos} = {value} silently changed the image")
                })?;
                corruptions += 1;
            }
        }
    }
    Ok(format!(
        "3000 round-trips bit-identical; {corruptions} header corruptions handled"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 11] = [
        ("entropy suite", entropy_suite, 1),
        ("InfoScore oracle", infoscore_oracle, 10),
        ("InfoScore edge cases", infoscore_edges, 1),
        ("heatmap pipeline equivalence", heatmap_equivalence, 30),
        ("ConvCRF oracle", convcrf_oracle, 60),
        ("gradient check", gradient_check, 60),
        ("overfit one-shot", overfit_one_shot, 300),
        ("class score direction", class_score_direction, 60),
        ("top-k layer direction", layer_count_direction, 60),
        ("mIoU hand case", miou_hand_case, 1),
        ("format round-trips", format_round_trips, 60),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{msg}; took {elapsed:.2?}, budget {budget}s"))
            }
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS {name} ({elapsed:.2?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name} ({elapsed:.2?}): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
