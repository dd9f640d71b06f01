//! Similarity index over encoder features, the threshold query, and group
//! assembly for training batches.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ToyImage};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::checkpoint::{Reader, WriteLe};

/// Default similarity threshold for the query function.
pub const DEFAULT_TAU: f64 = 0.7;

/// Encoder features for every image, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    ids: Vec<u64>,
    class_ids: Vec<usize>,
    /// `[count, dim]`, unit rows.
    features: Vec<f64>,
    dim: usize,
    pub tau: f64,
}

impl DatasetIndex {
    pub fn from_features(
        ids: Vec<u64>,
        class_ids: Vec<usize>,
        features: Vec<f64>,
        dim: usize,
        tau: f64,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot index an empty dataset".into(),
            ));
        }
        if ids.len() != class_ids.len() || features.len() != ids.len() * dim || dim == 0 {
            return Err(Error::Dimension(format!(
                "{} ids, {} classes, {} feature values of dim {dim}",
                ids.len(),
                class_ids.len(),
                features.len()
            )));
        }
        if !(-1.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [-1, 1]")));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidArgument(format!("duplicate id {dup}")));
        }
        for (i, row) in features.chunks(dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "feature row {i} has norm {norm}"
                )));
            }
        }
        Ok(DatasetIndex {
            ids,
            class_ids,
            features,
            dim,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.features[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .ok_or(Error::UnknownId(id))
    }

    pub fn class_of(&self, id: u64) -> Result<usize> {
        Ok(self.class_ids[self.position(id)?])
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        crate::tensor::kernels::dot(self.row(a), self.row(b))
    }
}

/// Builds one unit-norm feature row per image, in dataset order.
pub fn build_index<E>(dataset: &Dataset, encoder: E, tau: f64) -> Result<DatasetIndex>
where
    E: Fn(&ToyImage) -> Result<Vec<f64>> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot index an empty dataset".into(),
        ));
    }
    let feats = crate::par::map_indexed(dataset.len(), |i| encoder(&dataset.images[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dim = feats[0].len();
    if feats.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension("encoder returned ragged features".into()));
    }
    DatasetIndex::from_features(
        dataset.images.iter().map(|im| im.id).collect(),
        dataset.images.iter().map(|im| im.class_id).collect(),
        feats.concat(),
        dim,
        tau,
    )
}

/// Ids other than the anchor whose cosine with the anchor is at least the
/// index threshold, in index order.
pub fn query(anchor_id: u64, index: &DatasetIndex) -> Result<Vec<u64>> {
    query_with_tau(anchor_id, index, index.tau)
}

pub fn query_with_tau(anchor_id: u64, index: &DatasetIndex, tau: f64) -> Result<Vec<u64>> {
    let a = index.position(anchor_id)?;
    Ok((0..index.len())
        .filter(|&i| i != a && index.cosine(a, i) >= tau)
        .map(|i| index.ids[i])
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Random,
    Class,
    Similarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group_size: usize,
    pub query_mode: QueryMode,
    pub tau: f64,
    pub seed: u64,
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec {
            group_size: 4,
            query_mode: QueryMode::Similarity,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

impl GroupSpec {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [-1, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Result of [`assemble_group`], including any fallback that was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAssembly {
    /// Anchor first, then `group_size - 1` members.
    pub ids: Vec<u64>,
    /// Mode whose pool actually supplied the members.
    pub mode_used: QueryMode,
    /// Members were drawn with replacement because the pool was too small.
    pub padded: bool,
}

impl GroupAssembly {
    pub fn fell_back(&self, requested: QueryMode) -> bool {
        self.padded || self.mode_used != requested
    }
}

fn candidate_pool(
    anchor_id: u64,
    mode: QueryMode,
    tau: f64,
    index: &DatasetIndex,
) -> Result<Vec<u64>> {
    let a = index.position(anchor_id)?;
    Ok(match mode {
        QueryMode::Similarity => query_with_tau(anchor_id, index, tau)?,
        QueryMode::Class => (0..index.len())
            .filter(|&i| i != a && index.class_ids[i] == index.class_ids[a])
            .map(|i| index.ids[i])
            .collect(),
        QueryMode::Random => (0..index.len())
            .filter(|&i| i != a)
            .map(|i| index.ids[i])
            .collect(),
    })
}

/// Assembles an ordered group around `anchor_id`.
///
/// Members are drawn without replacement from the mode's pool. A pool with
/// fewer than `group_size - 1` entries is padded by drawing with replacement;
/// an empty pool downgrades similarity to class, then class to random. The
/// anchor never appears twice. Pure in `(anchor, spec, index)`.
pub fn assemble_group(
    anchor_id: u64,
    spec: &GroupSpec,
    index: &DatasetIndex,
) -> Result<GroupAssembly> {
    spec.validate()?;
    index.position(anchor_id)?;
    let need = spec.group_size - 1;
    let mut ids = vec![anchor_id];
    if need == 0 {
        return Ok(GroupAssembly {
            ids,
            mode_used: spec.query_mode,
            padded: false,
        });
    }
    let chain: &[QueryMode] = match spec.query_mode {
        QueryMode::Similarity => &[QueryMode::Similarity, QueryMode::Class, QueryMode::Random],
        QueryMode::Class => &[QueryMode::Class, QueryMode::Random],
        QueryMode::Random => &[QueryMode::Random],
    };
    let mut rng = rng::rng_from(spec.seed, &[rng::tag::GROUP, anchor_id]);
    for &mode in chain {
        let mut pool = candidate_pool(anchor_id, mode, spec.tau, index)?;
        if pool.is_empty() {
            continue;
        }
        if mode != spec.query_mode {
            log::warn!(
                "anchor {anchor_id}: {:?} pool empty, downgraded to {mode:?}",
                spec.query_mode
            );
        }
        let padded = pool.len() < need;
        if padded {
            log::warn!(
                "anchor {anchor_id}: {mode:?} pool has {} < {need} candidates, padding with replacement",
                pool.len()
            );
            ids.extend((0..need).map(|_| pool[rng.random_range(0..pool.len())]));
        } else {
            // partial Fisher-Yates
            for k in 0..need {
                let j = rng.random_range(k..pool.len());
                pool.swap(k, j);
            }
            ids.extend_from_slice(&pool[..need]);
        }
        return Ok(GroupAssembly {
            ids,
            mode_used: mode,
            padded,
        });
    }
    Err(Error::InvalidArgument(format!(
        "index has no images besides anchor {anchor_id}"
    )))
}

pub const INDEX_MAGIC: &[u8; 4] = b"GDI1";

impl DatasetIndex {
    /// `GDI1` layout: magic, `u64 count, u32 dim, f64 tau`, then `count x u64`
    /// ids, `count x u32` class ids, and the `count x dim` f64 feature matrix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.put_u64(self.ids.len() as u64);
        out.put_u32(self.dim as u32);
        out.put_f64(self.tau);
        for &id in &self.ids {
            out.put_u64(id);
        }
        for &c in &self.class_ids {
            out.put_u32(c as u32);
        }
        out.put_f64s(&self.features);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        r.magic(INDEX_MAGIC)?;
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let tau = r.f64()?;
        let ids = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let class_ids = (0..count)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let features = r.f64s(count * dim)?;
        r.finish()?;
        DatasetIndex::from_features(ids, class_ids, features, dim, tau)
            .map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode, generate_dataset, DatasetSpec};
    use proptest::prelude::*;

    fn toy(seed: u64) -> Dataset {
        generate_dataset(&DatasetSpec {
            num_classes: 4,
            images_per_class: 8,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    /// Anchor plus three vectors at cosines 0.9, 0.5, 0.75 from it.
    fn hand_index(tau: f64) -> DatasetIndex {
        let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let feats = [vec![1.0, 0.0], unit(0.9), unit(0.5), unit(0.75)].concat();
        DatasetIndex::from_features(vec![10, 11, 12, 13], vec![0, 0, 1, 1], feats, 2, tau).unwrap()
    }

    #[test]
    fn index_rows_follow_dataset_order() {
        let d = toy(1);
        let idx = build_index(&d, encode, DEFAULT_TAU).unwrap();
        assert_eq!(idx.len(), d.len());
        for (i, im) in d.images.iter().enumerate() {
            assert_eq!(idx.ids()[i], im.id);
            let n: f64 = idx.row(i).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn duplicate_image_gets_identical_rows() {
        let mut d = toy(1);
        let mut dup = d.images[3].clone();
        dup.id = 999;
        d.images.push(dup);
        let idx = build_index(&d, encode, DEFAULT_TAU).unwrap();
        assert_eq!(idx.row(3), idx.row(d.len() - 1));
    }

    #[test]
    fn empty_dataset_rejected() {
        let d = Dataset {
            num_classes: 2,
            image_size: 16,
            seed: 0,
            images: vec![],
        };
        assert!(build_index(&d, encode, DEFAULT_TAU).is_err());
    }

    #[test]
    fn query_threshold_cases() {
        let idx = hand_index(DEFAULT_TAU);
        assert_eq!(query(10, &idx).unwrap(), vec![11, 13]);
        assert_eq!(query_with_tau(10, &idx, -1.0).unwrap(), vec![11, 12, 13]);
        assert!(matches!(query(99, &idx), Err(Error::UnknownId(99))));
    }

    #[test]
    fn near_one_threshold_is_empty_without_duplicates() {
        let idx = build_index(&toy(2), encode, 1.0 - 1e-12).unwrap();
        // no two generated images coincide
        for &id in idx.ids() {
            assert!(query(id, &idx).unwrap().is_empty(), "anchor {id}");
        }
    }

    #[test]
    fn singleton_group_for_every_mode() {
        let idx = hand_index(DEFAULT_TAU);
        for mode in [QueryMode::Random, QueryMode::Class, QueryMode::Similarity] {
            let spec = GroupSpec {
                group_size: 1,
                query_mode: mode,
                ..Default::default()
            };
            assert_eq!(assemble_group(12, &spec, &idx).unwrap().ids, vec![12]);
        }
    }

    #[test]
    fn class_mode_stays_in_class() {
        let idx = build_index(&toy(3), encode, DEFAULT_TAU).unwrap();
        let anchor = idx.ids()[3 * 8 + 2];
        let spec = GroupSpec {
            group_size: 6,
            query_mode: QueryMode::Class,
            ..Default::default()
        };
        let g = assemble_group(anchor, &spec, &idx).unwrap();
        assert_eq!(g.ids.len(), 6);
        assert_eq!(g.ids[0], anchor);
        for id in &g.ids {
            assert_eq!(idx.class_of(*id).unwrap(), 3);
        }
        assert!(!g.fell_back(QueryMode::Class));
    }

    #[test]
    fn similarity_mode_supports_standard_group_sizes() {
        let d = generate_dataset(&DatasetSpec {
            num_classes: 4,
            images_per_class: 20,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let idx = build_index(&d, encode, DEFAULT_TAU).unwrap();
        for n in [1, 2, 4, 8, 16] {
            let spec = GroupSpec {
                group_size: n,
                ..Default::default()
            };
            let g = assemble_group(idx.ids()[5], &spec, &idx).unwrap();
            assert_eq!(g.ids.len(), n);
            assert_eq!(g.ids.iter().filter(|&&i| i == g.ids[0]).count(), 1);
        }
    }

    #[test]
    fn small_pool_pads_and_empty_pool_downgrades() {
        let idx = hand_index(DEFAULT_TAU);
        let spec = GroupSpec {
            group_size: 4,
            query_mode: QueryMode::Similarity,
            tau: 0.85,
            seed: 1,
        };
        // only id 11 clears 0.85
        let g = assemble_group(10, &spec, &idx).unwrap();
        assert!(g.padded);
        assert_eq!(g.mode_used, QueryMode::Similarity);
        assert_eq!(g.ids, vec![10, 11, 11, 11]);

        // nothing clears 0.95 for anchor 12; class pool {13} is non-empty
        let spec = GroupSpec { tau: 0.95, ..spec };
        let g = assemble_group(12, &spec, &idx).unwrap();
        assert_eq!(g.mode_used, QueryMode::Class);
        assert!(g.ids[1..].iter().all(|&i| i == 13));
    }

    #[test]
    fn index_file_round_trip() {
        let idx = build_index(&toy(5), encode, 0.6).unwrap();
        let back = DatasetIndex::from_bytes(&idx.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, idx);
    }

    proptest! {
        #[test]
        fn query_is_monotone_in_tau(a in -1.0f64..1.0, b in -1.0f64..1.0, anchor in 0usize..32) {
            let idx = build_index(&toy(9), encode, DEFAULT_TAU).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let id = idx.ids()[anchor];
            let strict: HashSet<u64> = query_with_tau(id, &idx, hi).unwrap().into_iter().collect();
            let loose: HashSet<u64> = query_with_tau(id, &idx, lo).unwrap().into_iter().collect();
            prop_assert!(strict.is_subset(&loose));
        }

        #[test]
        fn assembly_is_pure_and_anchor_unique(seed in 0u64..1000, anchor in 0usize..32, n in 1usize..9) {
            let idx = build_index(&toy(9), encode, DEFAULT_TAU).unwrap();
            let spec = GroupSpec { group_size: n, seed, ..Default::default() };
            let id = idx.ids()[anchor];
            let g1 = assemble_group(id, &spec, &idx).unwrap();
            let g2 = assemble_group(id, &spec, &idx).unwrap();
            prop_assert_eq!(&g1, &g2);
            prop_assert_eq!(g1.ids.len(), n);
            prop_assert_eq!(g1.ids.iter().filter(|&&i| i == id).count(), 1);
        }
    }
}
