//! Datasets, the on-disk format, the synthetic spectrogram generator, and
//! the three client partitioners.
//!
//! Unlabeled examples produced by `split_labeled` keep their ground truth
//! in a field the training paths never read; only `visible_label` feeds
//! losses, while `ground_truth` serves metrics and partitioners (which
//! model the experimenter arranging data on devices, not the devices
//! learning from it).

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, TAG_PARTITION, TAG_SPLIT, TAG_SYNTH, TAG_TEST_SPLIT};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Example {
    features: Tensor,
    label: Option<usize>,
    hidden_truth: Option<usize>,
}

impl Example {
    pub fn labeled(features: Tensor, label: usize) -> Example {
        Example {
            features,
            label: Some(label),
            hidden_truth: None,
        }
    }

    pub fn unlabeled(features: Tensor) -> Example {
        Example {
            features,
            label: None,
            hidden_truth: None,
        }
    }

    /// Feature matrix, shape (n_mels, n_frames).
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Label as training code may see it.
    pub fn visible_label(&self) -> Option<usize> {
        self.label
    }

    /// True class if known at all, visible or not. For metrics and for
    /// arranging data across clients; never an input to a loss.
    pub fn ground_truth(&self) -> Option<usize> {
        self.label.or(self.hidden_truth)
    }

    /// Moves the label out of training's sight.
    pub fn hide_label(mut self) -> Example {
        self.hidden_truth = self.label.take().or(self.hidden_truth);
        self
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Vec<Example>,
    pub n_classes: usize,
    pub n_mels: usize,
    pub n_frames: usize,
}

const MAGIC: &[u8; 4] = b"SKWS";
const VERSION: u32 = 1;

impl Dataset {
    pub fn new(
        examples: Vec<Example>,
        n_classes: usize,
        n_mels: usize,
        n_frames: usize,
    ) -> Result<Dataset> {
        if n_classes < 2 || n_mels == 0 || n_frames == 0 {
            return Err(Error::config(format!(
                "bad dataset geometry: {n_classes} classes, {n_mels}x{n_frames}"
            )));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.shape() != [n_mels, n_frames] {
                return Err(Error::shape(format!(
                    "example {i} has shape {:?}, dataset is {n_mels}x{n_frames}",
                    ex.features.shape()
                )));
            }
            if !ex.features.all_finite() {
                return Err(Error::domain(format!("example {i} has non-finite features")));
            }
            if let Some(l) = ex.ground_truth() {
                if l >= n_classes {
                    return Err(Error::domain(format!(
                        "example {i} labeled {l}, dataset has {n_classes} classes"
                    )));
                }
            }
        }
        Ok(Dataset {
            examples,
            n_classes,
            n_mels,
            n_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self
                .examples
                .get(i)
                .ok_or_else(|| Error::domain(format!("index {i} out of range")))?;
            examples.push(ex.clone());
        }
        Dataset::new(examples, self.n_classes, self.n_mels, self.n_frames)
    }

    /// Stacks the selected examples into a (B, n_mels, n_frames) tensor.
    pub fn features_of(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::domain("empty batch".to_string()));
        }
        let per = self.n_mels * self.n_frames;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let ex = self
                .examples
                .get(i)
                .ok_or_else(|| Error::domain(format!("index {i} out of range")))?;
            data.extend_from_slice(ex.features.data());
        }
        Tensor::from_vec(&[indices.len(), self.n_mels, self.n_frames], data)
    }

    /// Visible labels of the selected examples; errors if any are hidden.
    pub fn labels_of(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .ok_or_else(|| Error::domain(format!("index {i} out of range")))?
                    .visible_label()
                    .ok_or_else(|| Error::state(format!("example {i} has no visible label")))
            })
            .collect()
    }

    pub fn fully_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.visible_label().is_some())
    }

    /// Example indices of each class by ground truth; unlabeled-and-unknown
    /// examples are rejected.
    fn indices_by_class(&self) -> Result<Vec<Vec<usize>>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, ex) in self.examples.iter().enumerate() {
            let c = ex
                .ground_truth()
                .ok_or_else(|| Error::state(format!("example {i} has no class at all")))?;
            by_class[c].push(i);
        }
        Ok(by_class)
    }
}

/// Deterministic per-class time-frequency ridge pattern. Depends only on
/// the geometry, never the seed, so different corpora of the same shape
/// share classes.
pub fn class_template(class: usize, n_classes: usize, n_mels: usize, n_frames: usize) -> Tensor {
    debug_assert!(class < n_classes);
    let mut out = Tensor::zeros(&[n_mels, n_frames]);
    let cycles = 1.0 + 0.37 * class as f64;
    let phase = std::f64::consts::TAU * class as f64 / n_classes as f64;
    let amp = 3.0;
    let width = 1.0_f64.max(n_mels as f64 / 12.0);
    let data = out.data_mut();
    for t in 0..n_frames {
        let pos = std::f64::consts::TAU * cycles * t as f64 / n_frames as f64 + phase;
        let center = (n_mels as f64 - 1.0) * (0.5 + 0.45 * pos.sin());
        for m in 0..n_mels {
            let d = (m as f64 - center) / width;
            data[m * n_frames + t] = amp * (-0.5 * d * d).exp();
        }
    }
    out
}

/// Labeled corpus of `n_per_class * n_classes` examples: class template
/// plus Gaussian noise, stored at f32 precision so save/load round-trips
/// are bit-exact.
pub fn gen_synthetic(
    n_per_class: usize,
    n_classes: usize,
    n_mels: usize,
    n_frames: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || n_classes < 2 || n_mels == 0 || n_frames == 0 {
        return Err(Error::config(format!(
            "bad corpus shape: {n_per_class} per class, {n_classes} classes, {n_mels}x{n_frames}"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut rng = derive_rng(seed, &[TAG_SYNTH]);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let mut examples = Vec::with_capacity(n_per_class * n_classes);
    for class in 0..n_classes {
        let template = class_template(class, n_classes, n_mels, n_frames);
        for _ in 0..n_per_class {
            let mut f = template.clone();
            for v in f.data_mut() {
                let noisy = *v + noise_sigma * normal.sample(&mut rng);
                *v = noisy as f32 as f64;
            }
            examples.push(Example::labeled(f, class));
        }
    }
    Dataset::new(examples, n_classes, n_mels, n_frames)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.n_mels as u32).to_le_bytes())?;
    w.write_all(&(ds.n_frames as u32).to_le_bytes())?;
    w.write_all(&(ds.n_classes as u32).to_le_bytes())?;
    for ex in ds.examples() {
        let label: i16 = match ex.visible_label() {
            Some(l) => l as i16,
            None => -1,
        };
        w.write_all(&label.to_le_bytes())?;
    }
    for ex in ds.examples() {
        for &v in ex.features().data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_examples = r.read_u32()? as usize;
    let n_mels = r.read_u32()? as usize;
    let n_frames = r.read_u32()? as usize;
    let n_classes = r.read_u32()? as usize;

    let mut labels = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let at = r.offset();
        let raw = r.read_i16()?;
        let label = match raw {
            -1 => None,
            l if l >= 0 && (l as usize) < n_classes => Some(l as usize),
            _ => {
                return Err(Error::format(
                    at,
                    format!("label {raw} of example {i} out of range for {n_classes} classes"),
                ))
            }
        };
        labels.push(label);
    }

    let per = n_mels * n_frames;
    let mut examples = Vec::with_capacity(n_examples);
    for (i, label) in labels.into_iter().enumerate() {
        let mut data = Vec::with_capacity(per);
        for _ in 0..per {
            let at = r.offset();
            let v = r.read_f32()?;
            if !v.is_finite() {
                return Err(Error::format(at, format!("non-finite feature in example {i}")));
            }
            data.push(v as f64);
        }
        let features = Tensor::from_vec(&[n_mels, n_frames], data)?;
        examples.push(match label {
            Some(l) => Example::labeled(features, l),
            None => Example::unlabeled(features),
        });
    }
    Dataset::new(examples, n_classes, n_mels, n_frames)
}

/// Splits a fully labeled corpus into a class-balanced labeled part and a
/// remainder whose labels are hidden (ground truth retained for metrics).
pub fn split_labeled(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if !ds.fully_labeled() {
        return Err(Error::state("split_labeled needs a fully labeled dataset".to_string()));
    }
    if n_labeled < ds.n_classes {
        return Err(Error::config(format!(
            "n_labeled={n_labeled} below one per class ({} classes)",
            ds.n_classes
        )));
    }
    if n_labeled > ds.len() {
        return Err(Error::config(format!(
            "n_labeled={n_labeled} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut rng = derive_rng(seed, &[TAG_SPLIT]);
    let base = n_labeled / ds.n_classes;
    let remainder = n_labeled % ds.n_classes;
    // The remainder goes to a seeded random choice of classes.
    let mut class_order: Vec<usize> = (0..ds.n_classes).collect();
    class_order.shuffle(&mut rng);

    let mut by_class = ds.indices_by_class()?;
    let mut chosen = Vec::with_capacity(n_labeled);
    for (rank, &class) in class_order.iter().enumerate() {
        let quota = base + usize::from(rank < remainder);
        let pool = &mut by_class[class];
        if pool.len() < quota {
            return Err(Error::config(format!(
                "class {class} has {} examples, need {quota} labeled",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..quota]);
    }
    chosen.sort_unstable();

    let mut is_chosen = vec![false; ds.len()];
    for &i in &chosen {
        is_chosen[i] = true;
    }
    let labeled = ds.subset(&chosen)?;
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !is_chosen[i]).collect();
    let mut unlabeled = ds.subset(&rest)?;
    unlabeled.examples = unlabeled.examples.into_iter().map(Example::hide_label).collect();
    Ok((labeled, unlabeled))
}

/// Seeded held-out split: `test_frac` of the examples (at least one)
/// become the test set, labels untouched on both sides.
pub fn split_holdout(ds: &Dataset, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::config(format!(
            "test fraction {test_frac} outside (0, 1)"
        )));
    }
    let n_test = ((ds.len() as f64 * test_frac).round() as usize).clamp(1, ds.len() - 1);
    let mut rng = derive_rng(seed, &[TAG_TEST_SPLIT]);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((ds.subset(&train_idx)?, ds.subset(&test_idx)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Iid,
    LabelSkewK,
    Dirichlet,
}

/// Assignment of example indices to a labeled server pool and M client
/// shards. The partitioners below fill only the client side; the server
/// pool is a separate dataset in experiment code.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub server_labeled: Vec<usize>,
    pub client_shards: Vec<Vec<usize>>,
    pub scheme: Scheme,
    pub scheme_param: f64,
}

impl PartitionPlan {
    /// Checks disjointness and exact coverage of `0..n_examples`.
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        let mut seen = vec![false; n_examples];
        let mut count = 0usize;
        let mut visit = |idx: usize, what: &str| -> Result<()> {
            if idx >= n_examples {
                return Err(Error::domain(format!("{what} index {idx} out of range")));
            }
            if seen[idx] {
                return Err(Error::domain(format!("index {idx} appears twice")));
            }
            seen[idx] = true;
            count += 1;
            Ok(())
        };
        for &i in &self.server_labeled {
            visit(i, "server")?;
        }
        for (c, shard) in self.client_shards.iter().enumerate() {
            for &i in shard {
                visit(i, &format!("client {c}"))?;
            }
        }
        if count != n_examples {
            return Err(Error::domain(format!(
                "plan covers {count} of {n_examples} examples"
            )));
        }
        if matches!(self.scheme, Scheme::Iid | Scheme::LabelSkewK)
            && self.client_shards.iter().any(|s| s.is_empty())
        {
            return Err(Error::domain("empty client shard".to_string()));
        }
        Ok(())
    }
}

/// Seeded shuffle dealt round-robin; shard sizes differ by at most 1.
pub fn partition_iid(n_examples: usize, m_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if m_clients == 0 {
        return Err(Error::config("need at least one client".to_string()));
    }
    if n_examples < m_clients {
        return Err(Error::config(format!(
            "{n_examples} examples cannot cover {m_clients} clients"
        )));
    }
    let mut rng = derive_rng(seed, &[TAG_PARTITION]);
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(&mut rng);
    let mut shards = vec![Vec::new(); m_clients];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % m_clients].push(idx);
    }
    Ok(PartitionPlan {
        server_labeled: Vec::new(),
        client_shards: shards,
        scheme: Scheme::Iid,
        scheme_param: 0.0,
    })
}

/// Each client gets examples of exactly `k` distinct classes: clients take
/// k consecutive slots in a repeating seeded class permutation, and each
/// class's examples are split evenly among its holders.
pub fn partition_label_skew(
    ds: &Dataset,
    m_clients: usize,
    k: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let nc = ds.n_classes;
    if m_clients == 0 {
        return Err(Error::config("need at least one client".to_string()));
    }
    if k == 0 || k > nc {
        return Err(Error::config(format!(
            "k={k} must be in 1..={nc} (the class count)"
        )));
    }
    if m_clients * k < nc {
        return Err(Error::config(format!(
            "{m_clients} clients with k={k} cannot cover {nc} classes"
        )));
    }
    let mut rng = derive_rng(seed, &[TAG_PARTITION]);
    let mut perm: Vec<usize> = (0..nc).collect();
    perm.shuffle(&mut rng);

    // holders[c] lists clients of class c in client order.
    let mut holders = vec![Vec::new(); nc];
    for client in 0..m_clients {
        for j in 0..k {
            holders[perm[(client * k + j) % nc]].push(client);
        }
    }

    let mut by_class = ds.indices_by_class()?;
    let mut shards = vec![Vec::new(); m_clients];
    for c in 0..nc {
        let pool = &mut by_class[c];
        let n_holders = holders[c].len();
        if pool.len() < n_holders {
            return Err(Error::config(format!(
                "class {c} has {} examples for {n_holders} clients",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        let base = pool.len() / n_holders;
        let extra = pool.len() % n_holders;
        let mut at = 0usize;
        for (rank, &client) in holders[c].iter().enumerate() {
            let take = base + usize::from(rank < extra);
            shards[client].extend_from_slice(&pool[at..at + take]);
            at += take;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(PartitionPlan {
        server_labeled: Vec::new(),
        client_shards: shards,
        scheme: Scheme::LabelSkewK,
        scheme_param: k as f64,
    })
}

/// Per class, client proportions are drawn from Dir(alpha) and examples
/// assigned categorically. Empty shards are allowed (and expected for
/// small alpha).
pub fn partition_dirichlet(
    ds: &Dataset,
    m_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if m_clients == 0 {
        return Err(Error::config("need at least one client".to_string()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be finite and > 0, got {alpha}")));
    }
    let mut rng = derive_rng(seed, &[TAG_PARTITION]);
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::config(format!("bad Dirichlet alpha {alpha}: {e}")))?;
    let by_class = ds.indices_by_class()?;
    let mut shards = vec![Vec::new(); m_clients];
    for pool in by_class {
        let mut p: Vec<f64> = (0..m_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            for v in &mut p {
                *v /= total;
            }
        } else {
            // All draws underflowed to zero (tiny alpha); fall back to uniform.
            p.fill(1.0 / m_clients as f64);
        }
        for idx in pool {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut client = m_clients - 1;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    client = i;
                    break;
                }
            }
            shards[client].push(idx);
        }
    }
    Ok(PartitionPlan {
        server_labeled: Vec::new(),
        client_shards: shards,
        scheme: Scheme::Dirichlet,
        scheme_param: alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus() -> Dataset {
        gen_synthetic(10, 4, 6, 8, 0.05, 99).unwrap()
    }

    #[test]
    fn gen_shapes_and_label_balance() {
        let ds = gen_synthetic(100, 12, 6, 8, 0.05, 1).unwrap();
        assert_eq!(ds.len(), 1200);
        let mut counts = vec![0usize; 12];
        for ex in ds.examples() {
            counts[ex.visible_label().unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn zero_noise_makes_same_class_identical() {
        let ds = gen_synthetic(3, 3, 5, 7, 0.0, 5).unwrap();
        for c in 0..3 {
            let base = ds.example(c * 3).features();
            for i in 1..3 {
                assert_eq!(base.max_abs_diff(ds.example(c * 3 + i).features()), 0.0);
            }
        }
    }

    #[test]
    fn seeds_change_noise_not_templates() {
        let a = gen_synthetic(2, 3, 5, 7, 0.1, 1).unwrap();
        let b = gen_synthetic(2, 3, 5, 7, 0.1, 2).unwrap();
        assert!(a.example(0).features().max_abs_diff(b.example(0).features()) > 0.0);
        // Same geometry, same templates regardless of seed.
        let t1 = class_template(1, 3, 5, 7);
        let t2 = class_template(1, 3, 5, 7);
        assert_eq!(t1.max_abs_diff(&t2), 0.0);
    }

    #[test]
    fn templates_are_far_apart_relative_to_default_noise() {
        let (n_mels, n_frames, nc) = (12usize, 24usize, 12usize);
        let sigma = 0.1;
        let floor = 10.0 * sigma * ((n_mels * n_frames) as f64).sqrt();
        for a in 0..nc {
            for b in (a + 1)..nc {
                let ta = class_template(a, nc, n_mels, n_frames);
                let tb = class_template(b, nc, n_mels, n_frames);
                let dist: f64 = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    dist > floor,
                    "classes {a},{b}: distance {dist:.3} under floor {floor:.3}"
                );
            }
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = small_corpus();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!((back.n_classes, back.n_mels, back.n_frames), (4, 6, 8));
        for (a, b) in ds.examples().iter().zip(back.examples()) {
            assert_eq!(a.visible_label(), b.visible_label());
            assert_eq!(a.features().max_abs_diff(b.features()), 0.0);
        }
    }

    #[test]
    fn unlabeled_examples_serialize_as_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = small_corpus();
        let (_, unlabeled) = split_labeled(&ds, 8, 3).unwrap();
        save_dataset(&unlabeled, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert!(back.examples().iter().all(|e| e.visible_label().is_none()));
        // Hidden ground truth is in-memory state, not part of the format.
        assert!(back.examples().iter().all(|e| e.ground_truth().is_none()));
    }

    #[test]
    fn truncated_and_corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = small_corpus();
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        match load_dataset(&cut) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }

        let bad = dir.path().join("bad.bin");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad, &b).unwrap();
        match load_dataset(&bad) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected bad-magic error, got {other:?}"),
        }

        // Label out of range: labels start at byte 24.
        let mut b = bytes;
        b[24] = 0x7F;
        b[25] = 0x7F;
        std::fs::write(dir.path().join("lbl.bin"), &b).unwrap();
        match load_dataset(&dir.path().join("lbl.bin")) {
            Err(Error::Format { offset: 24, .. }) => {}
            other => panic!("expected label error at offset 24, got {other:?}"),
        }
    }

    #[test]
    fn split_balances_classes() {
        let ds = gen_synthetic(100, 12, 4, 6, 0.05, 7).unwrap();
        let (labeled, unlabeled) = split_labeled(&ds, 240, 11).unwrap();
        assert_eq!(labeled.len(), 240);
        assert_eq!(unlabeled.len(), 960);
        let mut counts = vec![0usize; 12];
        for ex in labeled.examples() {
            counts[ex.visible_label().unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20), "{counts:?}");

        let (labeled, _) = split_labeled(&ds, 250, 11).unwrap();
        let mut counts = vec![0usize; 12];
        for ex in labeled.examples() {
            counts[ex.visible_label().unwrap()] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 250);
        assert!(counts.iter().all(|&c| c == 20 || c == 21), "{counts:?}");
    }

    #[test]
    fn split_hides_but_keeps_ground_truth() {
        let ds = small_corpus();
        let (labeled, unlabeled) = split_labeled(&ds, 8, 3).unwrap();
        assert!(labeled.fully_labeled());
        for ex in unlabeled.examples() {
            assert!(ex.visible_label().is_none());
            assert!(ex.ground_truth().is_some());
        }
    }

    #[test]
    fn split_taking_everything_leaves_nothing() {
        let ds = small_corpus();
        let (labeled, unlabeled) = split_labeled(&ds, ds.len(), 3).unwrap();
        assert_eq!(labeled.len(), 40);
        assert!(unlabeled.is_empty());
    }

    #[test]
    fn split_rejects_bad_counts() {
        let ds = small_corpus();
        assert!(split_labeled(&ds, 3, 0).is_err());
        assert!(split_labeled(&ds, 41, 0).is_err());
    }

    #[test]
    fn iid_shard_sizes() {
        let plan = partition_iid(100, 100, 1).unwrap();
        assert!(plan.client_shards.iter().all(|s| s.len() == 1));
        plan.validate(100).unwrap();

        let plan = partition_iid(10, 3, 1).unwrap();
        let mut sizes: Vec<usize> = plan.client_shards.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        plan.validate(10).unwrap();

        assert!(partition_iid(2, 3, 1).is_err());
        assert!(partition_iid(5, 0, 1).is_err());
    }

    #[test]
    fn label_skew_gives_exactly_k_classes_per_client() {
        let ds = gen_synthetic(25, 4, 4, 6, 0.05, 2).unwrap();
        let plan = partition_label_skew(&ds, 4, 2, 9).unwrap();
        plan.validate(ds.len()).unwrap();
        for shard in &plan.client_shards {
            let mut classes: Vec<usize> =
                shard.iter().map(|&i| ds.example(i).ground_truth().unwrap()).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 2);
        }
    }

    #[test]
    fn label_skew_k_equal_classes_covers_all_labels() {
        let ds = gen_synthetic(25, 4, 4, 6, 0.05, 2).unwrap();
        let plan = partition_label_skew(&ds, 3, 4, 9).unwrap();
        plan.validate(ds.len()).unwrap();
        for shard in &plan.client_shards {
            let mut classes: Vec<usize> =
                shard.iter().map(|&i| ds.example(i).ground_truth().unwrap()).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 4);
        }
    }

    #[test]
    fn label_skew_holder_counts_are_balanced() {
        let ds = gen_synthetic(100, 12, 4, 6, 0.05, 2).unwrap();
        let plan = partition_label_skew(&ds, 100, 2, 13).unwrap();
        plan.validate(ds.len()).unwrap();
        // Count holders per class by enumerating shard contents.
        let mut holders = vec![0usize; 12];
        for shard in &plan.client_shards {
            let mut classes: Vec<usize> =
                shard.iter().map(|&i| ds.example(i).ground_truth().unwrap()).collect();
            classes.sort_unstable();
            classes.dedup();
            for c in classes {
                holders[c] += 1;
            }
        }
        assert_eq!(holders.iter().sum::<usize>(), 200);
        assert!(holders.iter().all(|&h| h == 16 || h == 17), "{holders:?}");
    }

    #[test]
    fn label_skew_rejects_infeasible_setups() {
        let ds = gen_synthetic(10, 4, 4, 6, 0.05, 2).unwrap();
        assert!(partition_label_skew(&ds, 4, 5, 0).is_err());
        assert!(partition_label_skew(&ds, 1, 2, 0).is_err());
        assert!(partition_label_skew(&ds, 4, 0, 0).is_err());
        // 3 holders of some class but only 2 examples of it.
        let tiny = gen_synthetic(2, 4, 4, 6, 0.05, 2).unwrap();
        assert!(partition_label_skew(&tiny, 12, 1, 0).is_err());
    }

    #[test]
    fn dirichlet_huge_alpha_is_nearly_uniform() {
        let ds = gen_synthetic(200, 4, 4, 6, 0.05, 3).unwrap();
        let plan = partition_dirichlet(&ds, 4, 1e9, 17).unwrap();
        plan.validate(ds.len()).unwrap();
        let expect = ds.len() as f64 / 4.0;
        for shard in &plan.client_shards {
            let rel = (shard.len() as f64 - expect).abs() / expect;
            assert!(rel < 0.2, "shard size {} vs uniform {expect}", shard.len());
        }
    }

    #[test]
    fn dirichlet_tiny_alpha_concentrates() {
        let ds = gen_synthetic(100, 4, 4, 6, 0.05, 3).unwrap();
        let plan = partition_dirichlet(&ds, 10, 0.01, 17).unwrap();
        plan.validate(ds.len()).unwrap();
        let concentrated = plan.client_shards.iter().any(|shard| {
            if shard.is_empty() {
                return false;
            }
            let mut counts = vec![0usize; 4];
            for &i in shard {
                counts[ds.example(i).ground_truth().unwrap()] += 1;
            }
            let top = *counts.iter().max().unwrap();
            top as f64 / shard.len() as f64 >= 0.9
        });
        assert!(concentrated, "no client is class-concentrated at alpha=0.01");
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        let ds = small_corpus();
        assert!(partition_dirichlet(&ds, 3, 0.0, 0).is_err());
        assert!(partition_dirichlet(&ds, 3, -1.0, 0).is_err());
        assert!(partition_dirichlet(&ds, 3, f64::INFINITY, 0).is_err());
    }

    #[test]
    fn partitioners_are_seed_deterministic() {
        let ds = gen_synthetic(30, 4, 4, 6, 0.05, 5).unwrap();
        let a = partition_label_skew(&ds, 5, 2, 123).unwrap();
        let b = partition_label_skew(&ds, 5, 2, 123).unwrap();
        assert_eq!(a.client_shards, b.client_shards);
        let c = partition_label_skew(&ds, 5, 2, 124).unwrap();
        assert_ne!(a.client_shards, c.client_shards);

        let a = partition_dirichlet(&ds, 5, 0.5, 9).unwrap();
        let b = partition_dirichlet(&ds, 5, 0.5, 9).unwrap();
        assert_eq!(a.client_shards, b.client_shards);

        let a = partition_iid(120, 7, 4).unwrap();
        let b = partition_iid(120, 7, 4).unwrap();
        assert_eq!(a.client_shards, b.client_shards);
    }

    #[test]
    fn holdout_split_sizes_and_determinism() {
        let ds = gen_synthetic(10, 4, 4, 6, 0.05, 6).unwrap();
        let (train, test) = split_holdout(&ds, 0.1, 77).unwrap();
        assert_eq!(test.len(), 4);
        assert_eq!(train.len(), 36);
        assert!(train.fully_labeled() && test.fully_labeled());

        let (train2, test2) = split_holdout(&ds, 0.1, 77).unwrap();
        assert_eq!(test.features_of(&[0]).unwrap().data(), test2.features_of(&[0]).unwrap().data());
        assert_eq!(train.len(), train2.len());

        assert!(split_holdout(&ds, 0.0, 1).is_err());
        assert!(split_holdout(&ds, 1.0, 1).is_err());
    }
}
