use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{compute_roc, distance, embed_all, MatchScore, RocResult};
use crate::dataops::{load_samples, DatasetManifest, GrayImage, Split};
use crate::networks::{generator_forward, ModelParameters};
use crate::training::stack_images;
use crate::{Error, Result};

/// Probe/gallery index pairs scored by an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairList {
    pub seed: u64,
    /// `(probe, gallery, genuine)`.
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairList {
    /// Hex SHA-256 over one `probe,gallery,genuine` line per pair.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for (i, j, g) in &self.pairs {
            h.update(format!("{i},{j},{}\n", u8::from(*g)).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every genuine pair (probe `i` against each clean image of the same
/// subject, its own ground truth included) plus as many impostor pairs drawn
/// without replacement under `seed`.
pub fn protocol_pairs(ids: &[String], seed: u64) -> Result<PairList> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for (j, b) in ids.iter().enumerate() {
            if a == b {
                genuine.push((i, j, true));
            } else {
                impostor.push((i, j, false));
            }
        }
    }
    if impostor.is_empty() {
        return Err(Error::Data("evaluation needs at least two subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    impostor.shuffle(&mut rng);
    impostor.truncate(genuine.len());
    impostor.sort_unstable();
    genuine.extend(impostor);
    Ok(PairList {
        seed,
        pairs: genuine,
    })
}

/// ROC of `probes` against the clean `gallery` over a fixed pair list.
pub fn evaluate_probes(
    verifier: &ModelParameters,
    probes: &[GrayImage],
    gallery: &[GrayImage],
    ids: &[String],
    pairs: &PairList,
) -> Result<RocResult> {
    if probes.len() != ids.len() || gallery.len() != ids.len() {
        return Err(Error::Data(format!(
            "{} probes and {} gallery images for {} identifiers",
            probes.len(),
            gallery.len(),
            ids.len()
        )));
    }
    let p = embed_all(verifier, probes)?;
    let g = embed_all(verifier, gallery)?;
    let scores = pairs
        .pairs
        .iter()
        .map(|&(i, j, _)| MatchScore::new(&ids[i], &ids[j], -distance(&p[i], &g[j])))
        .collect::<Result<Vec<_>>>()?;
    compute_roc(&scores)
}

/// Full-resolution generator output for each image.
pub fn deblur_images(generator: &ModelParameters, images: &[GrayImage]) -> Result<Vec<GrayImage>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let full = generator_forward(generator, &stack_images(chunk)?)?.full;
        for i in 0..chunk.len() {
            out.push(GrayImage::from_tensor(&full, i)?);
        }
    }
    Ok(out)
}

/// Blurred-input and deblurred-output verification on one split, over the
/// same verifier, gallery and pair list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEvaluation {
    pub blurred: RocResult,
    pub deblurred: RocResult,
    pub pair_count: usize,
    pub pair_seed: u64,
    pub pair_sha256: String,
}

pub fn evaluate_variant(
    generator: &ModelParameters,
    verifier: &ModelParameters,
    manifest: &DatasetManifest,
    split: Split,
    seed: u64,
) -> Result<VariantEvaluation> {
    let samples = load_samples(manifest, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.name())));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    let blurred: Vec<GrayImage> = samples.iter().map(|s| s.blurred.clone()).collect();
    let clean: Vec<GrayImage> = samples.iter().map(|s| s.clean.clone()).collect();
    let pairs = protocol_pairs(&ids, seed)?;
    let deblurred = deblur_images(generator, &blurred)?;
    Ok(VariantEvaluation {
        blurred: evaluate_probes(verifier, &blurred, &clean, &ids, &pairs)?,
        deblurred: evaluate_probes(verifier, &deblurred, &clean, &ids, &pairs)?,
        pair_count: pairs.pairs.len(),
        pair_seed: seed,
        pair_sha256: pairs.sha256(),
    })
}
