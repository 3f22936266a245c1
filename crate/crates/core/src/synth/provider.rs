use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::bundle::{mask_key, SyntheticEmbeddings};
use crate::classify::{EmbeddingProvider, ViewRequest};
use crate::error::{Error, Result};

const STREAM_VIEW: u64 = 5;

/// Embeds a view as the prototype of the dominant ground-truth instance's
/// class in the footprint, plus Gaussian noise, renormalized.
///
/// The noise and the label flip are drawn from ChaCha8 keyed by
/// `(seed, mask key, frame id, scale level)`, so results are independent of
/// request order.
pub struct SyntheticProvider<'a> {
    data: &'a SyntheticEmbeddings,
}

impl<'a> SyntheticProvider<'a> {
    pub fn new(data: &'a SyntheticEmbeddings) -> Self {
        Self { data }
    }

    fn view_rng(&self, key: &str, frame_id: u32, level: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.data.seed.to_le_bytes());
        h.update(key.as_bytes());
        h.update(frame_id.to_le_bytes());
        h.update(level.to_le_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_VIEW);
        rng
    }
}

impl EmbeddingProvider<f64> for SyntheticProvider<'_> {
    fn dim(&self) -> usize {
        self.data.prototypes.first().map_or(0, Vec::len)
    }

    fn embed(&self, req: &ViewRequest<'_>) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.data.instance_classes.len()];
        for p in req.footprint.iter() {
            if let Ok(inst) = usize::try_from(self.data.point_instances[p]) {
                counts[inst] += 1;
            }
        }
        let (inst, &best) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .ok_or_else(|| Error::Provider("no annotated instances".into()))?;
        if best == 0 {
            return Err(Error::Provider("footprint covers no annotated point".into()));
        }

        let num_classes = self.data.prototypes.len();
        let mut class = self.data.instance_classes[inst] as usize;
        let mut rng = self.view_rng(&mask_key(&req.proposal.mask), req.frame_id, req.scale.level);
        let flip: f64 = rng.random();
        if num_classes > 1 && flip < self.data.label_flip_rate {
            let mut other = rng.random_range(0..num_classes - 1);
            if other >= class {
                other += 1;
            }
            class = other;
        }
        let v: Vec<f64> = self.data.prototypes[class]
            .iter()
            .map(|&x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x + self.data.sigma * e
            })
            .collect();
        Ok(super::normalize_vec(v))
    }
}
