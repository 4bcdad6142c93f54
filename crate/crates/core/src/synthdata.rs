//! Seeded synthetic datasets.
//!
//! `TemporalOrderTask`: every class shows the same frames, reordered. The base clip
//! is `F / block_len` blocks; in block `b` a vertical bar of width `b + 1` sweeps
//! right over `block_len` frames. A class is a fixed permutation of the blocks, so
//! the multiset of frames (and of aligned segments) is identical across classes.
//!
//! `MultimodalXorTask`: each modality carries a latent bit along a fixed direction
//! at every step; the label is the XOR of the bits of one modality pair. Every
//! modality also carries a weak label cue `c ~ N(+-mu, 1)` along a second direction,
//! which keeps single-modality accuracy near `Phi(mu)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Modality, ModalityBundle};
use crate::rng::{RngStream, StreamRng};
use crate::sampling::FrameSequence;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalOrderCfg {
    pub num_classes: usize,
    pub frames: usize,
    pub block_len: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TemporalOrderCfg {
    fn default() -> Self {
        TemporalOrderCfg {
            num_classes: 4,
            frames: 35,
            block_len: 5,
            height: 32,
            width: 32,
            noise: 0.05,
            n_train: 400,
            n_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub clip: FrameSequence,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub num_classes: usize,
    pub samples: Vec<ClipSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalOrderData {
    /// Block order of each class.
    pub permutations: Vec<Vec<usize>>,
    pub train: ClipDataset,
    pub test: ClipDataset,
}

fn factorial_at_least(n: usize, k: usize) -> bool {
    let mut f: usize = 1;
    for i in 2..=n {
        f = f.saturating_mul(i);
        if f >= k {
            return true;
        }
    }
    f >= k
}

impl TemporalOrderCfg {
    pub fn num_blocks(&self) -> usize {
        self.frames / self.block_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("temporal-order task needs K >= 2"));
        }
        if self.frames < self.num_classes {
            return Err(Error::invalid(format!("temporal-order task needs F >= K (F={}, K={})", self.frames, self.num_classes)));
        }
        if self.block_len == 0 || !self.frames.is_multiple_of(self.block_len) {
            return Err(Error::invalid(format!("block_len {} must divide F={}", self.block_len, self.frames)));
        }
        let nb = self.num_blocks();
        if !factorial_at_least(nb, self.num_classes) {
            return Err(Error::invalid(format!(
                "K={} classes exceed the {nb}! distinct orders of {nb} blocks",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width < nb + self.block_len {
            return Err(Error::invalid(format!("frames must be at least {} pixels wide", nb + self.block_len)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be >= 0"));
        }
        Ok(())
    }

    /// Noise-free frame `j` of block `b`: a bar of width `b+1`, moving right with `j`.
    fn base_frame(&self, b: usize, j: usize, out: &mut Vec<f32>) {
        let (h, w) = (self.height, self.width);
        let bw = b + 1;
        let travel = w - bw;
        let x0 = if self.block_len > 1 { j * travel / (self.block_len - 1) } else { travel / 2 };
        for _c in 0..3 {
            for _y in 0..h {
                out.extend((0..w).map(|x| if x >= x0 && x < x0 + bw { 1.0f32 } else { 0.0 }));
            }
        }
    }

    /// Noise-free clip of a block order.
    pub fn clean_clip(&self, order: &[usize]) -> FrameSequence {
        let mut data = Vec::with_capacity(self.frames * 3 * self.height * self.width);
        for &b in order {
            for j in 0..self.block_len {
                self.base_frame(b, j, &mut data);
            }
        }
        FrameSequence::new(Tensor::new(vec![self.frames, 3, self.height, self.width], data).expect("clip shape"))
            .expect("clip layout")
    }

    fn noisy_clip(&self, order: &[usize], rng: &mut StreamRng) -> FrameSequence {
        let clean = self.clean_clip(order);
        if self.noise == 0.0 {
            return clean;
        }
        let data = clean
            .frames()
            .data()
            .iter()
            .map(|&v| (v as f64 + self.noise * rng.normal()).clamp(0.0, 1.0) as f32)
            .collect();
        FrameSequence::new(Tensor::new(clean.frames().shape().to_vec(), data).expect("clip shape")).expect("clip layout")
    }
}

fn balanced_labels(n: usize, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut labels);
    labels
}

/// Generates the task; `workers > 1` splits sample generation across threads
/// without changing the output.
pub fn gen_temporal_order(cfg: &TemporalOrderCfg, seed: u64, workers: usize) -> Result<TemporalOrderData> {
    cfg.validate()?;
    let root = RngStream::new(seed).named("temporal_order");
    let nb = cfg.num_blocks();
    let mut perm_rng = root.named("classes").rng();
    let mut seen = BTreeSet::new();
    let mut permutations = Vec::new();
    while permutations.len() < cfg.num_classes {
        let mut p: Vec<usize> = (0..nb).collect();
        perm_rng.shuffle(&mut p);
        if seen.insert(p.clone()) {
            permutations.push(p);
        }
    }
    let split = |name: &str, n: usize| -> ClipDataset {
        let s = root.named(name);
        let labels = balanced_labels(n, cfg.num_classes, &mut s.named("labels").rng());
        let samples = parallel_map(&labels, workers, |i, &label| ClipSample {
            clip: cfg.noisy_clip(&permutations[label], &mut s.split(i as u64).rng()),
            label,
        });
        ClipDataset {
            num_classes: cfg.num_classes,
            samples,
        }
    };
    let train = split("train", cfg.n_train);
    let test = split("test", cfg.n_test);
    Ok(TemporalOrderData { permutations, train, test })
}

/// Order-preserving map over `items` using up to `workers` threads.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || part.iter().enumerate().map(|(j, x)| f(c * chunk + j, x)).collect::<Vec<U>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultimodalXorCfg {
    pub dims: BTreeMap<Modality, usize>,
    /// The label is the XOR of these two modalities' bits.
    pub xor_pair: [Modality; 2],
    pub t_min: usize,
    pub t_max: usize,
    pub signal: f64,
    pub noise: f64,
    pub cue_mean: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub probe_max_acc: f64,
    pub max_attempts: usize,
}

impl Default for MultimodalXorCfg {
    fn default() -> Self {
        MultimodalXorCfg {
            dims: BTreeMap::from([(Modality::Rgb, 32), (Modality::FlowA, 32), (Modality::FlowB, 32), (Modality::Audio, 16)]),
            xor_pair: [Modality::Rgb, Modality::FlowA],
            t_min: 8,
            t_max: 16,
            signal: 1.0,
            noise: 1.0,
            cue_mean: 0.15,
            n_train: 2000,
            n_test: 1000,
            probe_max_acc: 0.60,
            max_attempts: 5,
        }
    }
}

impl MultimodalXorCfg {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::invalid("multimodal XOR task needs at least 2 modalities"));
        }
        for m in self.xor_pair {
            if !self.dims.contains_key(&m) {
                return Err(Error::invalid(format!("xor modality {m} is not among the configured modalities")));
            }
        }
        if self.xor_pair[0] == self.xor_pair[1] {
            return Err(Error::invalid("xor_pair must name two different modalities"));
        }
        if let Some((m, _)) = self.dims.iter().find(|(_, &d)| d < 2) {
            return Err(Error::invalid(format!("modality {m} needs d >= 2")));
        }
        if self.t_min == 0 || self.t_max < self.t_min {
            return Err(Error::invalid(format!("bad length range [{}, {}]", self.t_min, self.t_max)));
        }
        if self.n_train == 0 || self.n_test == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("n_train, n_test and max_attempts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqSample {
    pub bundle: ModalityBundle,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqDataset {
    pub num_classes: usize,
    pub samples: Vec<SeqSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalXorData {
    pub lengths: BTreeMap<Modality, usize>,
    /// Test accuracy of the per-modality linear probe of the accepted draw.
    pub probe_acc: BTreeMap<Modality, f64>,
    pub attempts: usize,
    pub train: SeqDataset,
    pub test: SeqDataset,
}

fn unit_pair(d: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
    let norm = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    norm(&mut u);
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
    norm(&mut v);
    (u, v)
}

struct XorDraw {
    lengths: BTreeMap<Modality, usize>,
    dirs: BTreeMap<Modality, (Vec<f64>, Vec<f64>)>,
}

fn xor_split(cfg: &MultimodalXorCfg, draw: &XorDraw, s: RngStream, n: usize, workers: usize) -> SeqDataset {
    let labels = balanced_labels(n, 2, &mut s.named("labels").rng());
    let samples = parallel_map(&labels, workers, |i, &label| {
        let mut r = s.split(i as u64).rng();
        let b0 = r.bit();
        let mut bundle = ModalityBundle::new();
        for (&m, &d) in &cfg.dims {
            let bit = if m == cfg.xor_pair[0] {
                b0
            } else if m == cfg.xor_pair[1] {
                b0 ^ (label == 1)
            } else {
                r.bit()
            };
            let sign = if bit { 1.0 } else { -1.0 };
            let cue = if label == 1 { cfg.cue_mean } else { -cfg.cue_mean } + r.normal();
            let (u, v) = &draw.dirs[&m];
            let t = draw.lengths[&m];
            let data = (0..t * d)
                .map(|k| {
                    let c = k % d;
                    (cfg.signal * sign * u[c] + cue * v[c] + cfg.noise * r.normal()) as f32
                })
                .collect();
            bundle.insert(m, Tensor::new(vec![t, d], data).expect("seq shape")).expect("rank 2");
        }
        SeqSample { bundle, label }
    });
    SeqDataset { num_classes: 2, samples }
}

/// Time-averaged features of one modality.
fn mean_features(ds: &SeqDataset, m: Modality) -> Vec<Vec<f64>> {
    ds.samples
        .iter()
        .map(|s| {
            let x = s.bundle.get(m).expect("modality present");
            let (t, d) = (x.shape()[0], x.shape()[1]);
            let mut f = vec![0.0; d];
            for row in x.data().chunks(d) {
                f.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64 / t as f64);
            }
            f
        })
        .collect()
}

/// Fits an L2-regularized logistic regression by full-batch gradient descent and
/// returns its accuracy on the evaluation features.
pub fn logistic_probe(train_x: &[Vec<f64>], train_y: &[usize], test_x: &[Vec<f64>], test_y: &[usize]) -> f64 {
    let d = train_x.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = train_x.len() as f64;
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in train_x.iter().zip(train_y) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - y as f64;
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += e * a / n);
            gb += e / n;
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= 0.5 * (g + 1e-3 * *a));
        b -= 0.5 * gb;
    }
    let hits = test_x
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            usize::from(z > 0.0) == y
        })
        .count();
    hits as f64 / test_x.len().max(1) as f64
}

/// Generates the task, redrawing (with a fresh stream) while any single-modality
/// linear probe exceeds `probe_max_acc`.
pub fn gen_multimodal_xor(cfg: &MultimodalXorCfg, seed: u64, workers: usize) -> Result<MultimodalXorData> {
    cfg.validate()?;
    let root = RngStream::new(seed).named("multimodal_xor");
    let mut worst = Vec::new();
    for attempt in 0..cfg.max_attempts {
        let a = root.split(attempt as u64);
        let mut r = a.named("layout").rng();
        let lengths: BTreeMap<Modality, usize> = cfg
            .dims
            .keys()
            .map(|&m| (m, cfg.t_min + r.below_inclusive(cfg.t_max - cfg.t_min)))
            .collect();
        let dirs = cfg.dims.iter().map(|(&m, &d)| (m, unit_pair(d, &mut r))).collect();
        let draw = XorDraw { lengths, dirs };
        let train = xor_split(cfg, &draw, a.named("train"), cfg.n_train, workers);
        let test = xor_split(cfg, &draw, a.named("test"), cfg.n_test, workers);
        let ytr: Vec<usize> = train.samples.iter().map(|s| s.label).collect();
        let yte: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
        let probe_acc: BTreeMap<Modality, f64> = cfg
            .dims
            .keys()
            .map(|&m| (m, logistic_probe(&mean_features(&train, m), &ytr, &mean_features(&test, m), &yte)))
            .collect();
        let max = probe_acc.values().copied().fold(0.0, f64::max);
        if max <= cfg.probe_max_acc {
            return Ok(MultimodalXorData {
                lengths: draw.lengths,
                probe_acc,
                attempts: attempt + 1,
                train,
                test,
            });
        }
        worst.push(max);
    }
    Err(Error::invalid(format!(
        "single-modality probe exceeded {} in all {} attempts (best probe per attempt: {worst:?})",
        cfg.probe_max_acc, cfg.max_attempts
    )))
}

#[derive(Serialize, Deserialize)]
struct Labels {
    num_classes: usize,
    labels: Vec<usize>,
}

impl ClipDataset {
    /// `labels.json` plus one `NNNNNN.clip` per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            s.clip.write(&dir.join(format!("{i:06}.clip")))?;
        }
        let labels = Labels {
            num_classes: self.num_classes,
            labels: self.samples.iter().map(|s| s.label).collect(),
        };
        fs::write(dir.join("labels.json"), serde_json::to_string(&labels)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let l: Labels = serde_json::from_str(&fs::read_to_string(dir.join("labels.json"))?)?;
        let samples = l
            .labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                Ok(ClipSample {
                    clip: FrameSequence::read(&dir.join(format!("{i:06}.clip")))?,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ClipDataset {
            num_classes: l.num_classes,
            samples,
        })
    }
}

impl SeqDataset {
    /// `labels.json` plus one bundle directory `NNNNNN/` per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            s.bundle.save(&dir.join(format!("{i:06}")))?;
        }
        let labels = Labels {
            num_classes: self.num_classes,
            labels: self.samples.iter().map(|s| s.label).collect(),
        };
        fs::write(dir.join("labels.json"), serde_json::to_string(&labels)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let l: Labels = serde_json::from_str(&fs::read_to_string(dir.join("labels.json"))?)?;
        let samples = l
            .labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                Ok(SeqSample {
                    bundle: ModalityBundle::load(&dir.join(format!("{i:06}")))?,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SeqDataset {
            num_classes: l.num_classes,
            samples,
        })
    }

    /// Copy with only one modality kept.
    pub fn select(&self, m: Modality) -> Result<SeqDataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut b = ModalityBundle::new();
                let x = s.bundle.get(m).ok_or_else(|| Error::invalid(format!("dataset has no modality {m}")))?;
                b.insert(m, x.clone())?;
                Ok(SeqSample { bundle: b, label: s.label })
            })
            .collect::<Result<_>>()?;
        Ok(SeqDataset {
            num_classes: self.num_classes,
            samples,
        })
    }
}
