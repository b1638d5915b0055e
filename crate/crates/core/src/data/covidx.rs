//! COVIDx-style partitioning and the three training-set configurations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::AugSpec;
use super::{Label, Manifest, ManifestEntry, Partition, Source};
use crate::error::{Error, Result};

/// Per-class counts `(Normal, Pneumonia, COVID19)` for each partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CovidxTargets {
    pub train: [usize; 3],
    pub test: [usize; 3],
}

impl Default for CovidxTargets {
    fn default() -> Self {
        Self {
            train: [7966, 5421, 152],
            test: [100, 100, 31],
        }
    }
}

impl CovidxTargets {
    /// Proportionally scaled counts, at least one image per class and partition.
    pub fn scaled(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "scale fraction must be in (0, 1], got {fraction}"
            )));
        }
        let d = Self::default();
        let s = |c: [usize; 3]| c.map(|n| ((n as f64 * fraction).round() as usize).max(1));
        Ok(Self {
            train: s(d.train),
            test: s(d.test),
        })
    }

    pub fn train_total(&self) -> usize {
        self.train.iter().sum()
    }

    pub fn test_total(&self) -> usize {
        self.test.iter().sum()
    }
}

/// Draws disjoint test and train partitions from the pooled sources.
///
/// Entries are pooled per label, shuffled under `seed`, and the test quota is
/// taken first. Any class without enough images is reported; nothing is
/// silently truncated.
pub fn build_covidx(
    rsna: &Manifest,
    covid: &Manifest,
    targets: &CovidxTargets,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    let mut pools: [Vec<&ManifestEntry>; 3] = Default::default();
    for e in rsna.iter().chain(covid.iter()) {
        if e.label == Label::Covid19 && e.source != Source::CovidCollection {
            return Err(Error::Manifest(format!(
                "`{}`: COVID19 images must come from the COVID collection",
                e.image_path
            )));
        }
        if e.is_augmented() {
            return Err(Error::Manifest(format!(
                "`{}`: source manifests hold originals only",
                e.image_path
            )));
        }
        pools[e.label as usize].push(e);
    }

    let short: Vec<String> = Label::ALL
        .iter()
        .filter_map(|&l| {
            let i = l as usize;
            let need = targets.train[i] + targets.test[i];
            (pools[i].len() < need).then(|| format!("{l}: need {need}, have {}", pools[i].len()))
        })
        .collect();
    if !short.is_empty() {
        return Err(Error::Shortfall(short.join("; ")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        let (te, rest) = pool.split_at(targets.test[i]);
        let tagged = |e: &&ManifestEntry, p| ManifestEntry {
            partition: p,
            ..(*e).clone()
        };
        test.extend(te.iter().map(|e| tagged(e, Partition::Test)));
        train.extend(rest[..targets.train[i]].iter().map(|e| tagged(e, Partition::Train)));
    }
    Ok((Manifest::new(train), Manifest::new(test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetMode {
    Raw,
    RawPlusAug,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub covid_aug_count: usize,
    pub majority_cap: usize,
    pub per_class: usize,
}

impl DatasetConfig {
    pub fn new(mode: DatasetMode) -> Self {
        Self {
            mode,
            covid_aug_count: 1000,
            majority_cap: 4000,
            per_class: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            DatasetMode::Raw => true,
            DatasetMode::RawPlusAug => self.majority_cap > 0,
            DatasetMode::Balanced => self.per_class > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{self:?}: counts must be positive")))
        }
    }
}

/// Keeps `n` of `entries`, chosen under `rng`, in their original order.
fn undersample(entries: &[ManifestEntry], n: usize, rng: &mut ChaCha8Rng) -> Vec<ManifestEntry> {
    if entries.len() <= n {
        return entries.to_vec();
    }
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| entries[i].clone()).collect()
}

/// `count` augmented copies, cycling through a shuffled order of `originals`.
fn augmented(
    originals: &[ManifestEntry],
    count: usize,
    aug: &AugSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ManifestEntry>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if originals.is_empty() {
        return Err(Error::Shortfall("cannot augment a class with no originals".into()));
    }
    let mut order: Vec<usize> = (0..originals.len()).collect();
    order.shuffle(rng);
    Ok((0..count)
        .map(|k| ManifestEntry {
            aug_recipe: Some(aug.draw(rng)),
            ..originals[order[k % order.len()]].clone()
        })
        .collect())
}

/// Builds the effective training manifest. Augmented entries reference the
/// train original they derive from; test entries are rejected outright.
pub fn apply_config(train: &Manifest, config: &DatasetConfig, aug: &AugSpec, seed: u64) -> Result<Manifest> {
    config.validate()?;
    aug.validate()?;
    if let Some(e) = train
        .iter()
        .find(|e| e.partition != Partition::Train || e.is_augmented())
    {
        return Err(Error::Manifest(format!(
            "`{}` is not a train original; configurations apply to the train partition only",
            e.image_path
        )));
    }
    if config.mode == DatasetMode::Raw {
        return Ok(train.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in Label::ALL {
        let class: Vec<ManifestEntry> = train.iter().filter(|e| e.label == label).cloned().collect();
        match config.mode {
            DatasetMode::RawPlusAug if label == Label::Covid19 => {
                let extra = augmented(&class, config.covid_aug_count, aug, &mut rng)?;
                out.extend(class);
                out.extend(extra);
            }
            DatasetMode::RawPlusAug => out.extend(undersample(&class, config.majority_cap, &mut rng)),
            DatasetMode::Balanced => {
                let n = config.per_class;
                if class.len() >= n {
                    out.extend(undersample(&class, n, &mut rng));
                } else {
                    let extra = augmented(&class, n - class.len(), aug, &mut rng)
                        .map_err(|_| Error::Shortfall(format!("{label}: no originals to augment")))?;
                    out.extend(class);
                    out.extend(extra);
                }
            }
            DatasetMode::Raw => unreachable!(),
        }
    }
    Ok(Manifest::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(label: Label, src: Source, n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry::new(format!("{src:?}/{label}/{i}.png"), label, src, Partition::Train))
            .collect()
    }

    fn full_sources() -> (Manifest, Manifest) {
        let mut rsna = source(Label::Normal, Source::Rsna, 8100);
        rsna.extend(source(Label::Pneumonia, Source::Rsna, 5600));
        let mut covid = source(Label::Covid19, Source::CovidCollection, 190);
        covid.extend(source(Label::Pneumonia, Source::CovidCollection, 40));
        (Manifest::new(rsna), Manifest::new(covid))
    }

    #[test]
    fn full_size_matches_table_counts() {
        let (r, c) = full_sources();
        let (train, test) = build_covidx(&r, &c, &CovidxTargets::default(), 3).unwrap();
        assert_eq!(train.counts(), [7966, 5421, 152]);
        assert_eq!(test.counts(), [100, 100, 31]);
        // The usually quoted train total, 13,569, is 30 more than the class
        // counts add up to; the class counts are what gets reproduced.
        assert_eq!(train.len(), 13539);
        assert_eq!(test.len(), 231);
        let test_paths: std::collections::HashSet<_> = test.iter().map(|e| &e.image_path).collect();
        assert!(train.iter().all(|e| !test_paths.contains(&e.image_path)));
    }

    #[test]
    fn seeded_and_reproducible() {
        let (r, c) = full_sources();
        let t = CovidxTargets::scaled(0.05).unwrap();
        assert_eq!(
            build_covidx(&r, &c, &t, 9).unwrap(),
            build_covidx(&r, &c, &t, 9).unwrap()
        );
        assert_ne!(
            build_covidx(&r, &c, &t, 9).unwrap(),
            build_covidx(&r, &c, &t, 10).unwrap()
        );
    }

    #[test]
    fn empty_covid_source_is_a_shortfall() {
        let (r, _) = full_sources();
        match build_covidx(&r, &Manifest::default(), &CovidxTargets::default(), 0) {
            Err(Error::Shortfall(msg)) => assert!(msg.contains("COVID19"), "{msg}"),
            other => panic!("expected shortfall, got {other:?}"),
        }
    }

    #[test]
    fn scaled_targets_keep_test_ratio() {
        let t = CovidxTargets::scaled(0.1).unwrap();
        assert_eq!(t.test, [10, 10, 3]);
        assert_eq!(t.train, [797, 542, 15]);
    }

    fn full_size_train() -> Manifest {
        let mut v = source(Label::Normal, Source::Rsna, 7966);
        v.extend(source(Label::Pneumonia, Source::Rsna, 5421));
        v.extend(source(Label::Covid19, Source::CovidCollection, 152));
        Manifest::new(v)
    }

    #[test]
    fn configurations() {
        let train = full_size_train();
        let aug = AugSpec::default();
        let raw = apply_config(&train, &DatasetConfig::new(DatasetMode::Raw), &aug, 1).unwrap();
        assert_eq!(raw.counts(), [7966, 5421, 152]);
        let rpa = apply_config(&train, &DatasetConfig::new(DatasetMode::RawPlusAug), &aug, 1).unwrap();
        assert_eq!(rpa.counts(), [4000, 4000, 1152]);
        assert_eq!(rpa.iter().filter(|e| e.is_augmented()).count(), 1000);
        let bal = apply_config(&train, &DatasetConfig::new(DatasetMode::Balanced), &aug, 1).unwrap();
        assert_eq!(bal.counts(), [1000, 1000, 1000]);
        assert_eq!(bal.iter().filter(|e| e.is_augmented()).count(), 848);
    }

    #[test]
    fn test_entries_refused() {
        let mut m = full_size_train();
        m.entries[0].partition = Partition::Test;
        let r = apply_config(&m, &DatasetConfig::new(DatasetMode::Balanced), &AugSpec::default(), 0);
        assert!(r.is_err());
    }
}
