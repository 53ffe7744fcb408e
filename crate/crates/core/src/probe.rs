//! Frozen-encoder evaluation: pooled per-layer feature extraction and the
//! four probes (last-layer linear, layer-wise linear, weighted sum over
//! layers, attentive pooling over layers).

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dsp::Waveform;
use crate::model::{classify, layer_features, truncated_normal, EncoderConfig, ParamStore, ViewBatch};
use crate::objective::{accuracy, cross_entropy};
use crate::patch::{patchify, MaskedView};
use crate::pipeline::Frontend;
use crate::rng::{derived_rng, stage};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{adamw_step, AdamConfig, Checkpoint, OptimState};
use crate::Error;

/// Key width of the attentive probe.
pub const ATTENTION_DIM: usize = 64;
const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layers {
    All,
    Last,
}

/// Pooled features of one split, one `[clips, D]` matrix per encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub layers: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[1])
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            layers: self.layers.iter().map(|l| gather(l, idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stored in the checkpoint layout as `features/layer_K` and `labels`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), Error> {
        let mut ck = Checkpoint::default();
        for (k, l) in self.layers.iter().enumerate() {
            ck.push(format!("features/layer_{k}"), l.shape(), l.data().iter().map(|&x| x as f32).collect());
        }
        ck.push("labels", &[self.len()], self.labels.iter().map(|&y| y as f32).collect());
        ck.save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, Error> {
        let ck = Checkpoint::load(dir.as_ref())?;
        let bad = |m: &str| Error::Invalid(format!("feature cache {}: {m}", dir.as_ref().display()));
        let labels = ck.array("labels").ok_or_else(|| bad("no labels"))?;
        let labels: Vec<usize> = labels.data.iter().map(|&y| y as usize).collect();
        let mut layers = Vec::new();
        while let Some(a) = ck.array(&format!("features/layer_{}", layers.len())) {
            if a.shape.len() != 2 || a.shape[0] != labels.len() {
                return Err(bad("feature rows do not match the labels"));
            }
            layers.push(Tensor::from_fn(&a.shape, |i| a.data[i] as f64));
        }
        if layers.is_empty() {
            return Err(bad("no feature layers"));
        }
        Ok(FeatureSet { layers, labels })
    }
}

fn gather(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let d = x.shape()[1];
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(&[idx.len(), d], data).expect("row gather")
}

/// Pooled per-layer features of `views`, in order. Views are encoded in
/// chunks, in parallel unless `sequential`.
pub fn features_of_views(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    views: &[MaskedView],
    layers: Layers,
    sequential: bool,
) -> Result<Vec<Tensor<f64>>, Error> {
    let run = |chunk: &[MaskedView]| -> Result<Vec<Tensor<f32>>, Error> {
        let batch = ViewBatch::<f32>::from_views(chunk, enc.dim)?;
        let all = layer_features(store, enc, &batch)?;
        Ok(match layers {
            Layers::All => all,
            Layers::Last => vec![all.last().expect("non-empty stack").clone()],
        })
    };
    let chunks: Vec<&[MaskedView]> = views.chunks(EXTRACT_CHUNK).collect();
    let parts: Vec<Vec<Tensor<f32>>> = if sequential {
        chunks.into_iter().map(run).collect::<Result<_, _>>()?
    } else {
        chunks.into_par_iter().map(run).collect::<Result<_, _>>()?
    };
    let count = parts.first().map_or(0, |p| p.len());
    Ok((0..count)
        .map(|k| {
            let data: Vec<f64> = parts.iter().flat_map(|p| p[k].data().iter().map(|&x| x as f64)).collect();
            Tensor::new(&[views.len(), enc.dim], data).expect("stacked features")
        })
        .collect())
}

/// Unmasked, unaugmented features of `clips` with the encoder in eval mode.
pub fn extract_features(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    fe: &Frontend,
    clips: &[Waveform],
    labels: &[usize],
    layers: Layers,
    sequential: bool,
) -> Result<FeatureSet, Error> {
    if clips.len() != labels.len() || clips.is_empty() {
        return Err(Error::Invalid(format!(
            "{} clips but {} labels for feature extraction",
            clips.len(),
            labels.len()
        )));
    }
    let view = |w: &Waveform| -> Result<MaskedView, Error> {
        Ok(patchify(&fe.spectrogram(w)?, enc.patch.0, enc.patch.1)?.full_view())
    };
    let views: Vec<MaskedView> = if sequential {
        clips.iter().map(view).collect::<Result<_, _>>()?
    } else {
        clips.par_iter().map(view).collect::<Result<_, _>>()?
    };
    Ok(FeatureSet {
        layers: features_of_views(store, enc, &views, layers, sequential)?,
        labels: labels.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    LinearLast,
    /// Index into the layer stack: 0 is the patch embedding, `depth` the
    /// normalized last block.
    LinearLayer(usize),
    WeightedSum,
    Attentive,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::LinearLast => "last",
            ProbeKind::LinearLayer(_) => "layer",
            ProbeKind::WeightedSum => "weighted",
            ProbeKind::Attentive => "attentive",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeKind::LinearLayer(k) => write!(f, "layer:{k}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.split_once(':') {
            Some(("layer", k)) => k
                .parse()
                .map(ProbeKind::LinearLayer)
                .map_err(|_| Error::Invalid(format!("bad layer index in probe kind {s:?}"))),
            None if s == "last" => Ok(ProbeKind::LinearLast),
            None if s == "weighted" => Ok(ProbeKind::WeightedSum),
            None if s == "attentive" => Ok(ProbeKind::Attentive),
            _ => Err(Error::Invalid(format!(
                "unknown probe kind {s:?} (last, layer:K, weighted, attentive)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Standardize each layer with training-split mean and deviation.
    pub standardize: bool,
    /// Weighted sum only: fixed layer weights used as given instead of the
    /// learned softmax.
    pub frozen_weights: Option<Vec<f64>>,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            epochs: 100,
            lr: 0.01,
            batch: 32,
            weight_decay: 0.01,
            seed: 0,
            standardize: true,
            frozen_weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub layer: Option<usize>,
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Layer mixture of the weighted-sum probe (a probability simplex).
    pub layer_weights: Option<Vec<f64>>,
    pub params: ParamStore<f64>,
}

fn standardize(train: &FeatureSet, test: &FeatureSet) -> (FeatureSet, FeatureSet) {
    let mut a = train.clone();
    let mut b = test.clone();
    for (k, l) in train.layers.iter().enumerate() {
        let (n, d) = (l.shape()[0], l.shape()[1]);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(l.row(r)).for_each(|(m, x)| *m += x / n as f64);
        }
        for r in 0..n {
            var.iter_mut().zip(l.row(r)).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2) / n as f64);
        }
        let scale: Vec<f64> = var.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        for t in [&mut a.layers[k], &mut b.layers[k]] {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = (*x - mean[i % d]) * scale[i % d];
            }
        }
    }
    (a, b)
}

struct ProbeModel {
    kind: ProbeKind,
    layers: usize,
    layer: Option<usize>,
    frozen: Option<Tensor<f64>>,
}

impl ProbeModel {
    fn init(&self, dim: usize, classes: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        crate::model::init_classifier(&mut store, "probe.classifier", dim, classes);
        match self.kind {
            ProbeKind::WeightedSum if self.frozen.is_none() => {
                store.add("probe.layer_logits", Tensor::zeros(&[1, self.layers]), false);
            }
            ProbeKind::Attentive => {
                let mut rng = derived_rng(seed, &[stage::PROBE, u64::MAX]);
                let std = 1.0 / (dim as f64).sqrt();
                store.add("probe.key.weight", truncated_normal(&[dim, ATTENTION_DIM], std, &mut rng), true);
                let embed = truncated_normal(&[self.layers, ATTENTION_DIM], 0.02, &mut rng);
                store.add("probe.layer_embed", embed, false);
                store.add("probe.query", Tensor::zeros(&[ATTENTION_DIM, 1]), false);
            }
            _ => {}
        }
        store
    }

    /// Logits for the rows `idx` of `set`.
    fn logits(&self, tape: &mut Tape<f64>, p: &crate::model::Bound<f64>, set: &FeatureSet, idx: &[usize]) -> Result<Var, Error> {
        let (b, d, l) = (idx.len(), set.dim(), set.layers.len());
        let q = match self.kind {
            ProbeKind::LinearLast | ProbeKind::LinearLayer(_) => {
                let k = self.layer.expect("linear probes fix a layer");
                tape.constant(gather(&set.layers[k], idx))
            }
            ProbeKind::WeightedSum => {
                let stacked: Vec<f64> = set.layers.iter().flat_map(|t| gather(t, idx).into_data()).collect();
                let x = tape.constant(Tensor::new(&[l, b * d], stacked)?);
                let w = match &self.frozen {
                    Some(w) => tape.constant(w.clone()),
                    None => {
                        let logits = p.var("probe.layer_logits")?;
                        tape.softmax(logits, 1)?
                    }
                };
                let mix = tape.matmul(w, x)?;
                tape.reshape(mix, &[b, d])?
            }
            ProbeKind::Attentive => {
                let mut rows = Vec::with_capacity(b * l * d);
                for &i in idx {
                    for t in &set.layers {
                        rows.extend_from_slice(t.row(i));
                    }
                }
                let x = tape.constant(Tensor::new(&[b, l, d], rows)?);
                let keys = tape.matmul(x, p.var("probe.key.weight")?)?;
                let keys = tape.add(keys, p.var("probe.layer_embed")?)?;
                let scores = tape.matmul(keys, p.var("probe.query")?)?;
                let scores = tape.scale(scores, 1.0 / (ATTENTION_DIM as f64).sqrt())?;
                let scores = tape.reshape(scores, &[b, l])?;
                let att = tape.softmax(scores, 1)?;
                let att = tape.reshape(att, &[b, 1, l])?;
                let pooled = tape.matmul(att, x)?;
                tape.reshape(pooled, &[b, d])?
            }
        };
        Ok(classify(tape, p, "probe.classifier", q)?)
    }

    fn accuracy(&self, store: &ParamStore<f64>, set: &FeatureSet) -> Result<f64, Error> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let idx: Vec<usize> = (0..set.len()).collect();
        let logits = self.logits(&mut tape, &p, set, &idx)?;
        Ok(accuracy(tape.value(logits), &set.labels))
    }
}

/// Trains one probe on `train` and reports accuracy on `test`.
pub fn probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<ProbeResult, Error> {
    let layers = train.layers.len();
    if layers == 0 || train.is_empty() || test.is_empty() || test.layers.len() != layers || test.dim() != train.dim() {
        return Err(Error::Invalid("probe needs non-empty train and test features of equal layout".into()));
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    let mut distinct = train.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Invalid("probe training split holds a single class".into()));
    }
    let layer = match cfg.kind {
        ProbeKind::LinearLast => Some(layers - 1),
        ProbeKind::LinearLayer(k) if k < layers => Some(k),
        ProbeKind::LinearLayer(k) => {
            return Err(Error::Invalid(format!("layer {k} out of range for {layers} layers")));
        }
        _ => None,
    };
    let frozen = match (&cfg.frozen_weights, cfg.kind) {
        (Some(w), ProbeKind::WeightedSum) if w.len() == layers => Some(Tensor::new(&[1, layers], w.clone())?),
        (Some(_), _) => {
            return Err(Error::Invalid("fixed layer weights need a weighted-sum probe over every layer".into()));
        }
        (None, _) => None,
    };
    let model = ProbeModel {
        kind: cfg.kind,
        layers,
        layer,
        frozen,
    };
    let (train, test) = if cfg.standardize {
        standardize(train, test)
    } else {
        (train.clone(), test.clone())
    };

    let mut store = model.init(train.dim(), classes, cfg.seed);
    let mut optim = OptimState::new(
        &store,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, &[stage::PROBE, epoch as u64]));
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let logits = model.logits(&mut tape, &p, &train, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Option<Vec<f64>>> = p.vars().iter().map(|&v| grads.get(v).map(|s| s.to_vec())).collect();
            let g: Vec<Option<&[f64]>> = g.iter().map(|x| x.as_deref()).collect();
            adamw_step(&mut store, &g, &mut optim, cfg.lr)?;
        }
    }

    let layer_weights = match (cfg.kind, &model.frozen) {
        (ProbeKind::WeightedSum, Some(w)) => Some(w.data().to_vec()),
        (ProbeKind::WeightedSum, None) => {
            let mut tape = Tape::new();
            let v = tape.constant(store.get("probe.layer_logits")?.clone());
            let s = tape.softmax(v, 1)?;
            Some(tape.value(s).data().to_vec())
        }
        _ => None,
    };
    Ok(ProbeResult {
        kind: cfg.kind,
        layer,
        accuracy: model.accuracy(&store, &test)?,
        train_accuracy: model.accuracy(&store, &train)?,
        layer_weights,
        params: store,
    })
}

/// Appends `kind,layer,accuracy` rows, writing the header for a new file.
pub fn append_results_csv(path: impl AsRef<Path>, results: &[ProbeResult]) -> Result<(), Error> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Failed(format!("writing {}: {e}", path.display()));
    if fresh {
        w.write_record(["kind", "layer", "accuracy"]).map_err(csv_err)?;
    }
    for r in results {
        let layer = r.layer.map_or(String::new(), |l| l.to_string());
        w.write_record([r.kind.name(), layer.as_str(), &format!("{:.6}", r.accuracy)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    /// Two layers: layer 0 is noise, layer 1 separates the classes along the
    /// first coordinate.
    pub(super) fn synthetic(n: usize, classes: usize, seed: u64) -> FeatureSet {
        let mut rng = rng_from(seed);
        let d = 6;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let noise = Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0));
        let sep = Tensor::from_fn(&[n, d], |i| {
            let (r, c) = (i / d, i % d);
            if c == labels[r] {
                3.0 + rng.gen_range(-0.5..0.5)
            } else {
                rng.gen_range(-0.5..0.5)
            }
        });
        FeatureSet {
            layers: vec![noise, sep],
            labels,
        }
    }

    fn quick(kind: ProbeKind) -> ProbeConfig {
        ProbeConfig {
            epochs: 30,
            lr: 0.05,
            batch: 16,
            ..ProbeConfig::new(kind)
        }
    }

    #[test]
    fn separable_features_are_learned_perfectly() {
        let (tr, te) = (synthetic(60, 3, 1), synthetic(30, 3, 2));
        for kind in [ProbeKind::LinearLast, ProbeKind::WeightedSum, ProbeKind::Attentive] {
            let r = probe(&tr, &te, &quick(kind)).unwrap();
            assert_eq!(r.accuracy, 1.0, "{kind}");
        }
    }

    #[test]
    fn weighted_sum_forms_a_simplex_and_prefers_the_informative_layer() {
        let (tr, te) = (synthetic(60, 3, 1), synthetic(30, 3, 2));
        let r = probe(&tr, &te, &quick(ProbeKind::WeightedSum)).unwrap();
        let w = r.layer_weights.unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10 && w.iter().all(|&x| x >= 0.0));
        assert!(w[1] > w[0], "{w:?}");
    }

    #[test]
    fn frozen_one_hot_weighted_sum_matches_the_layer_probe() {
        let (tr, te) = (synthetic(40, 4, 3), synthetic(40, 4, 4));
        for k in 0..2 {
            let lin = probe(&tr, &te, &quick(ProbeKind::LinearLayer(k))).unwrap();
            let mut one_hot = vec![0.0; 2];
            one_hot[k] = 1.0;
            let cfg = ProbeConfig {
                frozen_weights: Some(one_hot),
                ..quick(ProbeKind::WeightedSum)
            };
            let ws = probe(&tr, &te, &cfg).unwrap();
            assert!((ws.accuracy - lin.accuracy).abs() <= 0.01, "layer {k}");
        }
    }

    #[test]
    fn noise_features_sit_at_chance() {
        let classes = 5;
        let mut accs = Vec::new();
        for trial in 0..12u64 {
            let mut rng = rng_from(100 + trial);
            let make = |n: usize, rng: &mut crate::rng::Rng| {
                let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
                labels.shuffle(rng);
                FeatureSet {
                    layers: vec![Tensor::from_fn(&[n, 8], |_| rng.gen_range(-1.0..1.0))],
                    labels,
                }
            };
            let (tr, te) = (make(100, &mut rng), make(200, &mut rng));
            accs.push(probe(&tr, &te, &quick(ProbeKind::LinearLast)).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.2).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn accuracy_is_invariant_to_relabeling() {
        let (tr, te) = (synthetic(60, 3, 5), synthetic(30, 3, 6));
        let perm = [2, 0, 1];
        let relabel = |s: &FeatureSet| FeatureSet {
            layers: s.layers.clone(),
            labels: s.labels.iter().map(|&y| perm[y]).collect(),
        };
        let cfg = ProbeConfig {
            epochs: 3,
            ..quick(ProbeKind::LinearLayer(0))
        };
        let a = probe(&tr, &te, &cfg).unwrap();
        let b = probe(&relabel(&tr), &relabel(&te), &cfg).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut tr = synthetic(10, 2, 1);
        tr.labels = vec![0; 10];
        assert!(probe(&tr, &synthetic(10, 2, 2), &quick(ProbeKind::LinearLast)).is_err());
        let tr = synthetic(10, 2, 1);
        assert!(probe(&tr, &tr, &quick(ProbeKind::LinearLayer(2))).is_err());
        assert!("layer:x".parse::<ProbeKind>().is_err());
        assert_eq!("layer:3".parse::<ProbeKind>().unwrap(), ProbeKind::LinearLayer(3));
    }

    #[test]
    fn feature_cache_round_trips() {
        let s = synthetic(7, 2, 9);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = FeatureSet::load(dir.path()).unwrap();
        assert_eq!(back.labels, s.labels);
        for (a, b) in back.layers.iter().zip(&s.layers) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == (*y as f32) as f64));
        }
    }

    #[test]
    fn results_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.csv");
        let tr = synthetic(20, 2, 1);
        let r = probe(&tr, &tr, &quick(ProbeKind::LinearLayer(1))).unwrap();
        append_results_csv(&path, &[r.clone()]).unwrap();
        append_results_csv(&path, &[r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("kind,layer,accuracy\nlayer,1,1.000000"));
    }
}
