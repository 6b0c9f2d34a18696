use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{AdamW, EarlyStopping, Goal, Verdict};
use crate::augmentor::{target_of, HeadKind, JointModel};
use crate::corpus::{DatasetSpec, GazeRecord, Label, TextInstance};
use crate::error::{Error, Result};
use crate::evalkit::score;
use crate::gazegen::{Generator, GEN_PREFIX};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::ParamStore;
use crate::textenc::{tokenize, EncodedText, Vocab};

const MODEL_STREAM: u64 = 0x6d6f;
const SHUFFLE_STREAM: u64 = 0x7368;
const DROPOUT_STREAM: u64 = 0x6470;
const PATH_STREAM: u64 = 0x7061;
const EVAL_STREAM: u64 = 0x6576;

/// Learning-rate grid of the fine-tuning protocol.
pub const LR_GRID: [f64; 4] = [5e-5, 4e-5, 3e-5, 2e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch (the initial ones if no epoch ran).
    pub store: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    /// 1-based; 0 when no epoch completed.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

#[derive(Clone, Debug)]
pub struct Example {
    pub enc: EncodedText,
    pub label: Label,
}

pub fn encode_examples(
    items: &[TextInstance],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<Example>> {
    items
        .iter()
        .map(|t| {
            Ok(Example {
                enc: tokenize(&t.text1, t.text2.as_deref(), vocab, max_len)?,
                label: t.label,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GazeExample {
    pub enc: EncodedText,
    pub fixations: Vec<usize>,
}

pub fn encode_gaze(
    records: &[GazeRecord],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<GazeExample>> {
    records
        .iter()
        .map(|r| {
            let enc = tokenize(&r.text, None, vocab, max_len)?;
            if enc.n_words() != r.n_words() {
                return Err(Error::Tokenize(format!(
                    "sentence {} has {} words but tokenizes to {}",
                    r.sentence_id,
                    r.n_words(),
                    enc.n_words()
                )));
            }
            Ok(GazeExample {
                enc,
                fixations: r.fixations.clone(),
            })
        })
        .collect()
}

/// Hold out the last `ceil(fraction * n)` sentence ids (in sorted order)
/// with every reader's record of them, so no dev sentence is seen in
/// training.
pub fn split_gaze_by_sentence(
    records: &[GazeRecord],
    fraction: f64,
) -> Result<(Vec<GazeRecord>, Vec<GazeRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "dev fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.sentence_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let n_dev = (fraction * ids.len() as f64).ceil() as usize;
    if n_dev == 0 || n_dev >= ids.len() {
        return Err(Error::Split(format!(
            "{} sentences cannot give a non-empty train and dev split",
            ids.len()
        )));
    }
    let dev_ids: std::collections::HashSet<&str> =
        ids[ids.len() - n_dev..].iter().copied().collect();
    Ok(records
        .iter()
        .cloned()
        .partition(|r| !dev_ids.contains(r.sentence_id.as_str())))
}

/// Fresh generator with the same initialization it gets inside a joint
/// model built from the same config.
pub fn build_generator(
    cfg: &TrainConfig,
    vocab_size: usize,
) -> Result<(Generator, ParamStore<f32>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let g = Generator::new(
        &mut store,
        cfg.generator_config(vocab_size),
        RngState::new(cfg.seed, MODEL_STREAM),
    )?;
    Ok((g, store))
}

/// Fresh joint model; the generator slots are overwritten from `pretrained`
/// when the config asks for it.
pub fn build_joint(
    cfg: &TrainConfig,
    vocab_size: usize,
    spec: &DatasetSpec,
    pretrained: Option<&ParamStore<f32>>,
) -> Result<(JointModel, ParamStore<f32>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let jc = cfg.joint_config(vocab_size, HeadKind::for_spec(spec));
    let model = JointModel::new(&mut store, jc, RngState::new(cfg.seed, MODEL_STREAM))?;
    if cfg.pretrained_generator && !cfg.baseline {
        let src = pretrained.ok_or_else(|| {
            Error::Config(
                "pretrained_generator is set but no generator checkpoint was supplied".into(),
            )
        })?;
        let n = store.copy_prefix_from(src, GEN_PREFIX)?;
        if n != store.ids_with_prefix(GEN_PREFIX).count() {
            return Err(Error::Checkpoint(format!(
                "generator checkpoint covers only {n} tensors"
            )));
        }
    }
    Ok((model, store))
}

/// Mini-batch AdamW over `units` with patience-based early stopping on the
/// value returned by `eval`.
fn fit<U: Copy>(
    mut store: ParamStore<f32>,
    cfg: &TrainConfig,
    units: &[U],
    goal: Goal,
    loss: impl Fn(&mut Graph<'_, f32>, U, usize) -> Result<Var>,
    eval: impl Fn(&ParamStore<f32>) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let trainable = store
        .ids()
        .filter(|&id| store.get(id).requires_grad)
        .count();
    let frozen = store.len() - trainable;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stop = EarlyStopping::new(cfg.patience, goal);
    let mut best = store.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..units.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        RngState::new(cfg.seed, SHUFFLE_STREAM)
            .derive(&[epoch as u64])
            .rng()
            .shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Option<Vec<f32>>> = vec![None; store.len()];
            for (k, &u) in batch.iter().enumerate() {
                let drop = RngState::new(cfg.seed, DROPOUT_STREAM).derive(&[
                    epoch as u64,
                    b as u64,
                    k as u64,
                ]);
                let mut g = Graph::with_params(&store).train(drop);
                let l = loss(&mut g, units[u], epoch)?;
                let lv = g.value(l).data[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                total += lv;
                for (id, grad) in g.backward(l)?.params() {
                    let slot = acc[id.0].get_or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, &x) in slot.iter_mut().zip(grad) {
                        *a += x;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in acc.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= inv);
            }
            let n = opt.step(&mut store, &acc, cfg.lr)?;
            assert_eq!(n, trainable, "optimizer touched a frozen parameter");
        }
        let dev = eval(&store)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / units.len().max(1) as f64,
            dev_metric: dev,
        });
        match stop.observe(epoch, dev) {
            Verdict::Improved => best.clone_from(&store),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (best_epoch, best_metric) = stop.best().unwrap_or((0, f64::NAN));
    Ok(TrainOutcome {
        store: best,
        log,
        best_epoch,
        best_metric,
        trainable_params: trainable,
        frozen_params: frozen,
    })
}

/// Token-weighted mean teacher-forced NLL per saccade decision.
pub fn gaze_nll(gen: &Generator, store: &ParamStore<f32>, data: &[GazeExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("gaze evaluation set".into()));
    }
    let (mut sum, mut steps) = (0.0, 0usize);
    for ex in data {
        let mut g = Graph::with_params(store).no_grad();
        let ctx = gen.context(&mut g, &ex.enc, None)?;
        let l = gen.nll_teacher_forced(&mut g, &ctx, &ex.fixations)?;
        let n = ex.fixations.len() + 1;
        sum += g.value(l).data[0] as f64 * n as f64;
        steps += n;
    }
    Ok(sum / steps as f64)
}

/// Teacher-forced pretraining of the generator on gaze records; the dev
/// NLL picks the checkpoint.
pub fn pretrain_generator(
    gen: &Generator,
    init: ParamStore<f32>,
    train: &[GazeExample],
    dev: &[GazeExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("gaze training corpus".into()));
    }
    let units: Vec<usize> = (0..train.len()).collect();
    fit(
        init,
        cfg,
        &units,
        Goal::Minimize,
        |g, i, _| {
            let ctx = gen.context(g, &train[i].enc, None)?;
            gen.nll_teacher_forced(g, &ctx, &train[i].fixations)
        },
        |s| gaze_nll(gen, s, dev),
    )
}

/// Head outputs averaged over `n` scanpaths per example, in eval mode.
pub fn predict_outputs(
    model: &JointModel,
    store: &ParamStore<f32>,
    data: &[Example],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let base = RngState::new(seed, EVAL_STREAM);
    data.iter()
        .enumerate()
        .map(|(i, ex)| model.predict(store, &ex.enc, n, base.derive(&[i as u64])))
        .collect()
}

pub fn evaluate_metric(
    model: &JointModel,
    store: &ParamStore<f32>,
    spec: &DatasetSpec,
    data: &[Example],
    n: usize,
    seed: u64,
) -> Result<f64> {
    let out = predict_outputs(model, store, data, n, seed)?;
    let gold: Vec<Label> = data.iter().map(|e| e.label).collect();
    score(spec.metric, &out, &gold)
}

/// Joint fine-tuning over shuffled (instance, scanpath) pairs; the dev
/// metric picks the checkpoint.
pub fn train_joint(
    model: &JointModel,
    mut init: ParamStore<f32>,
    spec: &DatasetSpec,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty(
            "joint training needs train and dev examples".into(),
        ));
    }
    if cfg.freeze_generator || cfg.baseline {
        init.set_requires_grad_prefix(GEN_PREFIX, false);
    }
    let targets: Vec<f64> = train
        .iter()
        .map(|e| target_of(spec, e.label))
        .collect::<Result<_>>()?;
    let n = if cfg.baseline {
        1
    } else {
        cfg.n_scanpaths_train
    };
    let units: Vec<(usize, usize)> = (0..train.len())
        .flat_map(|i| (0..n).map(move |s| (i, s)))
        .collect();
    let mut out = fit(
        init,
        cfg,
        &units,
        Goal::Maximize,
        |g, (i, s), epoch| {
            let rng =
                RngState::new(cfg.seed, PATH_STREAM).derive(&[epoch as u64, i as u64, s as u64]);
            model.pair_loss(g, &train[i].enc, targets[i], rng, None)
        },
        |s| evaluate_metric(model, s, spec, dev, n, cfg.seed),
    )?;
    out.store.set_requires_grad_prefix(GEN_PREFIX, true);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrChoice {
    pub lr: f64,
    pub index: usize,
    pub dev_metrics: Vec<f64>,
}

/// Run `train` for every grid entry and keep the best dev metric; ties
/// (within `1e-6`) go to the smaller learning rate.
pub fn select_lr(grid: &[f64], mut train: impl FnMut(f64) -> Result<f64>) -> Result<LrChoice> {
    if grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    let dev_metrics: Vec<f64> = grid.iter().map(|&lr| train(lr)).collect::<Result<_>>()?;
    let top = dev_metrics
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let index = (0..grid.len())
        .filter(|&i| dev_metrics[i] >= top - super::optim::IMPROVEMENT_TOL)
        .min_by(|&a, &b| grid[a].total_cmp(&grid[b]))
        .unwrap_or(0);
    Ok(LrChoice {
        lr: grid[index],
        index,
        dev_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{make_task, task_spec, SuiteConfig};
    use crate::corpus::{make_synthetic_suite, MarkovGaze};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            d_model: 16,
            layers: 1,
            max_len: 24,
            l_max: 6,
            max_epochs: 2,
            batch_size: 8,
            n_scanpaths_train: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_suite() -> crate::corpus::SyntheticSuite {
        let cfg = SuiteConfig {
            gaze_sentences: 12,
            train: 24,
            test: 12,
            lexicon: 40,
            ..SuiteConfig::default()
        };
        make_synthetic_suite(&cfg).unwrap()
    }

    fn vocab_of(s: &crate::corpus::SyntheticSuite) -> Vocab {
        Vocab::build(s.texts(), 200).unwrap()
    }

    #[test]
    fn lr_selection() {
        let c = select_lr(&[3e-5], |_| Ok(0.1)).unwrap();
        assert_eq!((c.lr, c.index), (3e-5, 0));
        let metrics = [0.8, 0.9, 0.9, 0.7];
        let pick = |lr: f64| Ok(metrics[LR_GRID.iter().position(|&g| g == lr).unwrap()]);
        let c = select_lr(&LR_GRID, pick).unwrap();
        assert_eq!((c.index, c.lr), (2, 3e-5));
        assert_eq!(select_lr(&LR_GRID, pick).unwrap(), c);
        assert!(select_lr(&[], pick).is_err());
    }

    #[test]
    fn zero_epochs_returns_init_and_runs_are_reproducible() {
        let suite = tiny_suite();
        let v = vocab_of(&suite);
        let data = encode_gaze(&suite.gaze, &v, 24).unwrap();
        let mut cfg = tiny_cfg();
        let (gen, init) = build_generator(&cfg, v.len()).unwrap();
        cfg.max_epochs = 0;
        let out = pretrain_generator(&gen, init.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(out.store.digest(), init.digest());
        assert_eq!(out.best_epoch, 0);
        cfg.max_epochs = 2;
        let a = pretrain_generator(&gen, init.clone(), &data[..16], &data[16..], &cfg).unwrap();
        let b = pretrain_generator(&gen, init.clone(), &data[..16], &data[16..], &cfg).unwrap();
        assert_eq!(a.store.to_checkpoint_bytes(), b.store.to_checkpoint_bytes());
        assert_eq!(a.log, b.log);
        assert_ne!(a.store.digest(), init.digest());
        assert!(a.log.iter().all(|e| e.dev_metric.is_finite()));
    }

    #[test]
    fn generator_init_matches_joint_slots() {
        let suite = tiny_suite();
        let v = vocab_of(&suite);
        let mut cfg = tiny_cfg();
        let (_, gen_store) = build_generator(&cfg, v.len()).unwrap();
        cfg.pretrained_generator = false;
        let spec = task_spec("keyword").unwrap();
        let (_, joint) = build_joint(&cfg, v.len(), &spec, None).unwrap();
        assert_eq!(joint.subset(GEN_PREFIX), gen_store);
        cfg.pretrained_generator = true;
        assert!(build_joint(&cfg, v.len(), &spec, None).is_err());
    }

    #[test]
    fn freeze_contract_and_pair_count() {
        let suite = tiny_suite();
        let v = vocab_of(&suite);
        let spec = task_spec("keyword").unwrap();
        let task = suite.task("keyword").unwrap();
        let train = encode_examples(&task.train, &v, 24).unwrap();
        let dev = encode_examples(&task.test, &v, 24).unwrap();
        let mut cfg = tiny_cfg();
        cfg.pretrained_generator = false;
        cfg.freeze_generator = true;
        let (m, init) = build_joint(&cfg, v.len(), &spec, None).unwrap();
        let out = train_joint(&m, init.clone(), &spec, &train, &dev, &cfg).unwrap();
        let gen_before = init.subset(GEN_PREFIX).to_checkpoint_bytes();
        assert_eq!(
            out.store.subset(GEN_PREFIX).to_checkpoint_bytes(),
            gen_before
        );
        assert_eq!(out.frozen_params, init.ids_with_prefix(GEN_PREFIX).count());
        assert_eq!(out.trainable_params + out.frozen_params, init.len());
        cfg.freeze_generator = false;
        let live = train_joint(&m, init, &spec, &train, &dev, &cfg).unwrap();
        assert_eq!(live.frozen_params, 0);
        assert_ne!(
            live.store.subset(GEN_PREFIX).to_checkpoint_bytes(),
            gen_before
        );
    }

    #[test]
    fn regression_task_trains() {
        let scfg = SuiteConfig {
            train: 16,
            test: 8,
            lexicon: 40,
            ..SuiteConfig::default()
        };
        let lex = crate::corpus::synthetic::lexicon(scfg.lexicon, scfg.seed);
        let task = make_task(&scfg, &lex, "count").unwrap();
        let texts: Vec<&str> = task
            .train
            .iter()
            .chain(&task.test)
            .map(|t| t.text1.as_str())
            .collect();
        let v = Vocab::build(texts, 200).unwrap();
        let train = encode_examples(&task.train, &v, 24).unwrap();
        let dev = encode_examples(&task.test, &v, 24).unwrap();
        let mut cfg = tiny_cfg();
        cfg.pretrained_generator = false;
        cfg.max_epochs = 1;
        let (m, init) = build_joint(&cfg, v.len(), &task.spec, None).unwrap();
        let out = train_joint(&m, init, &task.spec, &train, &dev, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].train_loss.is_finite());
    }

    #[test]
    fn oracle_nll_is_below_untrained() {
        let suite = tiny_suite();
        let v = vocab_of(&suite);
        let data = encode_gaze(&suite.gaze, &v, 24).unwrap();
        let (gen, init) = build_generator(&tiny_cfg(), v.len()).unwrap();
        let untrained = gaze_nll(&gen, &init, &data).unwrap();
        let oracle = MarkovGaze::default().mean_step_nll(&suite.gaze);
        assert!(oracle < untrained, "{oracle} vs {untrained}");
    }

    #[test]
    fn gaze_split_keeps_sentences_together() {
        let suite = tiny_suite();
        let (tr, dv) = split_gaze_by_sentence(&suite.gaze, 0.25).unwrap();
        assert_eq!(tr.len() + dv.len(), suite.gaze.len());
        assert!(dv
            .iter()
            .all(|d| tr.iter().all(|t| t.sentence_id != d.sentence_id)));
        assert_eq!(dv.len(), 3 * 2);
        assert!(split_gaze_by_sentence(&suite.gaze, 0.0).is_err());
    }

    #[test]
    fn jsonl_log() {
        let log = vec![EpochLog {
            epoch: 1,
            train_loss: 0.5,
            dev_metric: 0.75,
        }];
        assert_eq!(
            log_to_jsonl(&log),
            "{\"epoch\":1,\"train_loss\":0.5,\"dev_metric\":0.75}\n"
        );
    }
}
