//! Hierarchical stratified epoch sampler and file-level split management.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::jetdata::io::read_jets;
use crate::jetdata::{ClassLabel, Jet};

/// Per-class target fractions and the number of jets per epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPolicy {
    fractions: [Ratio<u64>; ClassLabel::COUNT],
    epoch_size: usize,
}

impl SamplingPolicy {
    /// One third QCD, one third `qqb_bcs`, one third split between `bb`, `qq`
    /// (1/9 each) and the three di-tau channels (1/27 each).
    pub fn paper(epoch_size: usize) -> Result<Self> {
        let r = Ratio::new;
        let mut f = [Ratio::from_integer(0); ClassLabel::COUNT];
        f[ClassLabel::Qcd.index()] = r(1, 3);
        f[ClassLabel::QqbBcs.index()] = r(1, 3);
        f[ClassLabel::Bb.index()] = r(1, 9);
        f[ClassLabel::Qq.index()] = r(1, 9);
        f[ClassLabel::TauHTauE.index()] = r(1, 27);
        f[ClassLabel::TauHTauMu.index()] = r(1, 27);
        f[ClassLabel::TauHTauH.index()] = r(1, 27);
        Self::new(f, epoch_size)
    }

    pub fn new(fractions: [Ratio<u64>; ClassLabel::COUNT], epoch_size: usize) -> Result<Self> {
        let total: Ratio<u64> = fractions.iter().copied().sum();
        if total != Ratio::from_integer(1) {
            return Err(Error::Config(format!("class fractions sum to {total}, not 1")));
        }
        if epoch_size < ClassLabel::COUNT {
            return Err(Error::Config(format!(
                "epoch size {epoch_size} is smaller than the number of classes"
            )));
        }
        Ok(Self { fractions, epoch_size })
    }

    pub fn epoch_size(&self) -> usize {
        self.epoch_size
    }

    pub fn fraction(&self, class: ClassLabel) -> Ratio<u64> {
        self.fractions[class.index()]
    }

    /// Jets per class in one epoch, indexed by class code.
    pub fn counts(&self) -> [usize; ClassLabel::COUNT] {
        let c = largest_remainder(&self.fractions, self.epoch_size as u64);
        std::array::from_fn(|i| c[i] as usize)
    }
}

/// Hamilton apportionment of `total` by exact fractions summing to one.
/// Leftover units go to the largest remainders, ties to the lower index.
pub fn largest_remainder(fractions: &[Ratio<u64>], total: u64) -> Vec<u64> {
    let total = total as u128;
    let mut counts = Vec::with_capacity(fractions.len());
    // remainder as an exact fraction rem/den
    let mut rems: Vec<(usize, u128, u128)> = Vec::with_capacity(fractions.len());
    for (i, f) in fractions.iter().enumerate() {
        let num = *f.numer() as u128 * total;
        let den = *f.denom() as u128;
        counts.push((num / den) as u64);
        rems.push((i, num % den, den));
    }
    let assigned: u64 = counts.iter().sum();
    let leftover = (total as u64).saturating_sub(assigned) as usize;
    rems.sort_by(|a, b| (b.1 * a.2).cmp(&(a.1 * b.2)).then(a.0.cmp(&b.0)));
    for &(i, _, _) in rems.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

/// Per-class jet pools that are reshuffled and cycled when exhausted.
#[derive(Debug, Clone)]
pub struct ClassPools {
    pools: Vec<Vec<Jet>>,
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl ClassPools {
    pub fn from_jets(jets: impl IntoIterator<Item = Jet>) -> Self {
        let mut pools = vec![Vec::new(); ClassLabel::COUNT];
        for j in jets {
            pools[j.label.index()].push(j);
        }
        let order = pools.iter().map(|p| (0..p.len()).collect()).collect();
        let cursor = pools.iter().map(|p| p.len()).collect();
        Self { pools, order, cursor }
    }

    pub fn len(&self, class: ClassLabel) -> usize {
        self.pools[class.index()].len()
    }

    pub fn total(&self) -> usize {
        self.pools.iter().map(Vec::len).sum()
    }

    fn next<R: Rng + ?Sized>(&mut self, c: usize, rng: &mut R) -> &Jet {
        if self.cursor[c] >= self.order[c].len() {
            self.order[c].shuffle(rng);
            self.cursor[c] = 0;
        }
        let i = self.order[c][self.cursor[c]];
        self.cursor[c] += 1;
        &self.pools[c][i]
    }
}

/// One epoch: exactly `policy.epoch_size()` jets with deterministic per-class
/// counts in a random global order. Pools persist across epochs, so draws are
/// streamed rather than a full sweep.
pub fn draw_epoch<'a, R: Rng + ?Sized>(
    policy: &SamplingPolicy,
    pools: &'a mut ClassPools,
    rng: &'a mut R,
) -> Result<EpochStream<'a, R>> {
    let counts = policy.counts();
    for c in ClassLabel::ALL {
        if counts[c.index()] > 0 && pools.len(c) == 0 {
            return Err(Error::Config(format!("no jets available for class {c}")));
        }
    }
    let mut labels: Vec<u8> = Vec::with_capacity(policy.epoch_size());
    for c in ClassLabel::ALL {
        labels.extend(std::iter::repeat_n(c.code(), counts[c.index()]));
    }
    labels.shuffle(rng);
    Ok(EpochStream {
        labels: labels.into_iter(),
        pools,
        rng,
    })
}

pub struct EpochStream<'a, R: ?Sized> {
    labels: std::vec::IntoIter<u8>,
    pools: &'a mut ClassPools,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Iterator for EpochStream<'_, R> {
    type Item = Jet;

    fn next(&mut self) -> Option<Jet> {
        let c = self.labels.next()?;
        Some(self.pools.next(c as usize, self.rng).clone())
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.labels.size_hint()
    }
}

impl<R: Rng + ?Sized> ExactSizeIterator for EpochStream<'_, R> {}

/// Train/validation/test file lists, disjoint at the file level.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

impl SplitManifest {
    pub fn files(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn files_mut(&mut self, split: Split) -> &mut Vec<PathBuf> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train.iter().chain(&self.val).chain(&self.test).all(|p| seen.insert(p))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, files) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = writeln!(s, "[{name}]");
            for f in files {
                let _ = writeln!(s, "{}", f.display());
            }
        }
        s
    }

    /// Parses the `[train]`/`[val]`/`[test]` text format. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let mut current: Option<Split> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.parse().map_err(|_| {
                    Error::Config(format!("manifest line {}: unknown section [{name}]", ln + 1))
                })?);
                continue;
            }
            let split =
                current.ok_or_else(|| Error::Config(format!("manifest line {}: path before any section", ln + 1)))?;
            m.files_mut(split).push(PathBuf::from(line));
        }
        if !m.is_disjoint() {
            return Err(Error::Config("manifest splits share a file".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads a manifest; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m = Self::from_text(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for split in [Split::Train, Split::Val, Split::Test] {
                for f in m.files_mut(split) {
                    if f.is_relative() {
                        *f = dir.join(&*f);
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Shuffles `files` and assigns them to train/val/test by `ratios`
/// (largest remainder on the file count, every split non-empty).
pub fn split_files<R: Rng + ?Sized>(files: &[PathBuf], ratios: [f64; 3], rng: &mut R) -> Result<SplitManifest> {
    if files.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 files for three splits, got {}",
            files.len()
        )));
    }
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let distinct: HashSet<_> = files.iter().collect();
    if distinct.len() != files.len() {
        return Err(Error::InvalidArgument("duplicate file in split input".into()));
    }
    let n = files.len();
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut idx: Vec<usize> = (0..3).collect();
    idx.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in idx.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], usize::MAX - j)).expect("three splits");
            sizes[donor] -= 1;
            sizes[i] = 1;
        }
    }
    let mut shuffled = files.to_vec();
    shuffled.shuffle(rng);
    let mut it = shuffled.into_iter();
    Ok(SplitManifest {
        train: it.by_ref().take(sizes[0]).collect(),
        val: it.by_ref().take(sizes[1]).collect(),
        test: it.collect(),
    })
}

/// Every jet of `files` exactly once, in file order, without reweighting.
pub fn natural_stream(files: &[PathBuf]) -> impl Iterator<Item = Result<Jet>> + '_ {
    files.iter().flat_map(|f| -> Box<dyn Iterator<Item = Result<Jet>>> {
        match read_jets(f) {
            Ok(r) => Box::new(r),
            Err(e) => Box::new(std::iter::once(Err(e))),
        }
    })
}
