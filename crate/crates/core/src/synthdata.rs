//! Deterministic multi-domain identity datasets. Identities are latent
//! prototypes shared across domains; a domain is a per-channel affine style
//! (gain, bias) plus a low-frequency texture field and Gaussian noise.
//! All values are quantized to f32 so the on-disk manifest round-trips
//! bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::standard_normal;

/// RNG stream offsets: prototypes are keyed by identity so that every
/// domain renders the same person from the same latent.
const PROTO_STREAM: u64 = 1 << 40;
const DOMAIN_STREAM: u64 = 1 << 41;

/// Per-channel style of one domain.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Per-channel multiplicative style; strictly positive.
    pub gain: Vec<f64>,
    /// Per-channel additive style.
    pub bias: Vec<f64>,
    /// Amplitude of the low-frequency per-sample texture field.
    pub texture_scale: f64,
    /// Per-pixel Gaussian noise amplitude.
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn validate(&self, c0: usize) -> Result<()> {
        if self.gain.len() != c0 || self.bias.len() != c0 {
            return Err(Error::Shape(format!(
                "style vectors must have {c0} channels"
            )));
        }
        if self.gain.iter().any(|&g| g <= 0.0) {
            return Err(Error::Domain("gain must be elementwise positive".into()));
        }
        if self.texture_scale < 0.0 || self.noise_std < 0.0 {
            return Err(Error::Domain("texture and noise scales must be non-negative".into()));
        }
        Ok(())
    }

    /// A camera-like sub-style of this domain: deterministic per-channel
    /// gain/bias jitter around the base style, much smaller than the gap
    /// between domains.
    pub fn camera(&self, k: usize, strength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0xCA0_u64 + 131 * self.domain_id as u64 + k as u64);
        let gain = self
            .gain
            .iter()
            .map(|g| g * (1.0 + strength * standard_normal(&mut rng)))
            .map(|g| g.max(0.05))
            .collect();
        let bias = self
            .bias
            .iter()
            .map(|b| b + strength * standard_normal(&mut rng))
            .collect();
        Self {
            domain_id: self.domain_id,
            gain,
            bias,
            texture_scale: self.texture_scale,
            noise_std: self.noise_std,
        }
    }

    /// Fixed style table for the 4-channel desk images. Styles are far
    /// apart in gain/bias so a statistics classifier separates domains.
    pub fn preset(domain_id: usize) -> Self {
        let table: [([f64; 4], [f64; 4], f64); 5] = [
            ([1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], 0.25),
            ([1.6, 0.7, 1.25, 0.5], [0.9, -0.6, 0.35, -0.25], 0.30),
            ([0.6, 1.4, 0.8, 1.3], [-0.5, 0.4, -0.7, 0.6], 0.28),
            ([1.3, 0.5, 1.5, 0.8], [0.3, 0.8, -0.4, -0.8], 0.32),
            ([0.8, 1.2, 0.6, 1.5], [-0.8, -0.3, 0.7, 0.45], 0.27),
        ];
        let (gain, bias, texture) = table[domain_id % table.len()];
        Self {
            domain_id,
            gain: gain.to_vec(),
            bias: bias.to_vec(),
            texture_scale: texture,
            noise_std: 0.02,
        }
    }
}

/// One generated image with its identity and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub identity: usize,
    pub domain_id: usize,
}

/// A split of samples sharing one image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub image_shape: (usize, usize, usize),
}

impl Dataset {
    pub fn empty(image_shape: (usize, usize, usize)) -> Self {
        Self {
            samples: Vec::new(),
            image_shape,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by identity, in ascending identity order.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        map
    }

    pub fn identities(&self) -> Vec<usize> {
        self.by_identity().into_keys().collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    /// Merges several splits; shapes must agree.
    pub fn merged(parts: &[Dataset]) -> Result<Dataset> {
        let shape = parts
            .first()
            .ok_or_else(|| Error::Domain("cannot merge zero datasets".into()))?
            .image_shape;
        let mut samples = Vec::new();
        for p in parts {
            if p.image_shape != shape {
                return Err(Error::Shape("merged datasets must share image shape".into()));
            }
            samples.extend(p.samples.iter().cloned());
        }
        Ok(Dataset {
            samples,
            image_shape: shape,
        })
    }
}

/// Latent prototype of one identity: a content map independent of domain.
/// Each identity draws a channel-mixing matrix and a latent field; the
/// rendered map carries the identity in its cross-channel structure, which
/// survives any per-channel affine restyling.
fn prototype(seed: u64, identity: usize, shape: (usize, usize, usize)) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROTO_STREAM + identity as u64);
    let (h, w, c) = shape;
    // Row-normalized mixing matrix: unit channel variance, identity-specific
    // channel correlations.
    let mut mix = vec![0.0; c * c];
    for row in 0..c {
        let v: Vec<f64> = (0..c).map(|_| standard_normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for (k, x) in v.iter().enumerate() {
            mix[row * c + k] = x / norm;
        }
    }
    let mut out = vec![0.0; h * w * c];
    for pos in 0..h * w {
        let latent: Vec<f64> = (0..c).map(|_| standard_normal(&mut rng)).collect();
        for row in 0..c {
            out[pos * c + row] = (0..c).map(|k| mix[row * c + k] * latent[k]).sum();
        }
    }
    out
}

/// Smooth per-sample texture: a 2x2 corner grid per channel, bilinearly
/// upsampled over the image and centered to zero spatial mean per channel.
fn texture_field(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Vec<f64> {
    let (h, w, c) = shape;
    let corners: Vec<f64> = (0..4 * c).map(|_| standard_normal(rng)).collect();
    let mut field = vec![0.0; h * w * c];
    for i in 0..h {
        let u = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
        for j in 0..w {
            let v = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.0 };
            for k in 0..c {
                let c00 = corners[k];
                let c01 = corners[c + k];
                let c10 = corners[2 * c + k];
                let c11 = corners[3 * c + k];
                let top = c00 * (1.0 - v) + c01 * v;
                let bot = c10 * (1.0 - v) + c11 * v;
                field[(i * w + j) * c + k] = top * (1.0 - u) + bot * u;
            }
        }
    }
    for k in 0..c {
        let mean: f64 = (0..h * w).map(|p| field[p * c + k]).sum::<f64>() / (h * w) as f64;
        for p in 0..h * w {
            field[p * c + k] -= mean;
        }
    }
    field
}

/// Generates `n_ids` identities (numbered from `id_start`) with `n_per_id`
/// samples each in the given domain style. Deterministic given `seed`;
/// prototypes are shared across domains by identity number.
pub fn generate_domain(
    seed: u64,
    id_start: usize,
    n_ids: usize,
    n_per_id: usize,
    spec: &DomainSpec,
    shape: (usize, usize, usize),
) -> Result<Dataset> {
    if n_ids < 2 || n_per_id < 2 {
        return Err(Error::Domain(
            "need at least 2 identities with 2 samples each".into(),
        ));
    }
    spec.validate(shape.2)?;
    let (h, w, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DOMAIN_STREAM + spec.domain_id as u64);
    let mut samples = Vec::with_capacity(n_ids * n_per_id);
    for id in id_start..id_start + n_ids {
        let proto = prototype(seed, id, shape);
        for _ in 0..n_per_id {
            let texture = texture_field(&mut rng, shape);
            let mut data = Vec::with_capacity(h * w * c);
            for pos in 0..h * w {
                for k in 0..c {
                    let content = proto[pos * c + k] + spec.texture_scale * texture[pos * c + k];
                    let noise = spec.noise_std * standard_normal(&mut rng);
                    let v = spec.gain[k] * content + spec.bias[k] + noise;
                    data.push(v as f32 as f64);
                }
            }
            samples.push(Sample {
                image: Tensor::new(vec![h, w, c], data)?,
                identity: id,
                domain_id: spec.domain_id,
            });
        }
    }
    Ok(Dataset {
        samples,
        image_shape: shape,
    })
}

/// Splits a test set into per-identity query/gallery halves: the first
/// `n_query` samples of each identity become queries.
pub fn query_gallery_split(test: &Dataset, n_query: usize) -> (Dataset, Dataset) {
    let mut query = Dataset::empty(test.image_shape);
    let mut gallery = Dataset::empty(test.image_shape);
    for (_, indices) in test.by_identity() {
        for (k, &i) in indices.iter().enumerate() {
            let s = test.samples[i].clone();
            if k < n_query {
                query.samples.push(s);
            } else {
                gallery.samples.push(s);
            }
        }
    }
    (query, gallery)
}

/// The desk-scale adaptation task: a labeled source domain, an unlabeled
/// target domain with disjoint identities, and a held-out test protocol of
/// fresh identities rendered in both domain styles. Retrieval is evaluated
/// across domains in both directions, probing how well the two domains'
/// embedding spaces align.
pub struct UdaBundle {
    pub source: Dataset,
    pub target: Dataset,
    /// Target-styled queries, matched against the source-styled gallery.
    pub query_target: Dataset,
    pub gallery_source: Dataset,
    /// Source-styled queries, matched against the target-styled gallery.
    pub query_source: Dataset,
    pub gallery_target: Dataset,
}

pub const DESK_SHAPE: (usize, usize, usize) = (8, 8, 4);

/// Generates the desk adaptation task: 30 source identities and 30 distinct
/// target identities with 8 samples each, plus 30 fresh test identities
/// rendered in both domain styles for the cross-domain retrieval probes
/// (2 query and 4 gallery samples per identity and direction).
pub fn desk_uda(seed: u64) -> Result<UdaBundle> {
    let src_spec = DomainSpec::preset(0);
    let tgt_spec = DomainSpec::preset(1);
    let source = generate_domain(seed, 0, 30, 8, &src_spec, DESK_SHAPE)?;
    let target = generate_domain(seed, 30, 30, 8, &tgt_spec, DESK_SHAPE)?;
    let query_target = generate_domain(seed, 60, 30, 2, &tgt_spec, DESK_SHAPE)?;
    let gallery_source = generate_domain(seed, 60, 30, 4, &src_spec, DESK_SHAPE)?;
    let query_source = generate_domain(seed, 60, 30, 2, &src_spec, DESK_SHAPE)?;
    let gallery_target = generate_domain(seed, 60, 30, 4, &tgt_spec, DESK_SHAPE)?;
    Ok(UdaBundle {
        source,
        target,
        query_target,
        gallery_source,
        query_source,
        gallery_target,
    })
}

/// The desk generalization task: three merged labeled source domains and an
/// unseen fourth domain for testing.
pub struct DgBundle {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

/// Three source domains of 20 identities x 6 samples each (disjoint ids)
/// and an unseen-domain test split of 24 fresh identities.
pub fn desk_dg(seed: u64) -> Result<DgBundle> {
    let mut parts = Vec::new();
    for d in 0..3 {
        parts.push(generate_domain(seed, d * 20, 20, 6, &DomainSpec::preset(d), DESK_SHAPE)?);
    }
    let train = Dataset::merged(&parts)?;
    // The unseen domain sits well outside the convex hull of the training
    // styles.
    let unseen = DomainSpec {
        domain_id: 3,
        gain: vec![1.9, 0.4, 1.75, 0.42],
        bias: vec![1.1, -1.0, 0.85, -1.05],
        texture_scale: 0.34,
        noise_std: 0.02,
    };
    let test = generate_domain(seed, 60, 24, 6, &unseen, DESK_SHAPE)?;
    let (query, gallery) = query_gallery_split(&test, 2);
    Ok(DgBundle {
        train,
        query,
        gallery,
    })
}

pub const MANIFEST_HEADER: &str = "bridgelab-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "images.bin";

/// Writes bytes through a temp file and renames into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a dataset as a text manifest plus an f32 image blob under `dir`.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w, c) = dataset.image_shape;
    let image_bytes = h * w * c * 4;

    let mut blob = Vec::with_capacity(12 + dataset.len() * image_bytes);
    blob.extend_from_slice(&(h as u32).to_le_bytes());
    blob.extend_from_slice(&(w as u32).to_le_bytes());
    blob.extend_from_slice(&(c as u32).to_le_bytes());

    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, s) in dataset.samples.iter().enumerate() {
        let offset = i * image_bytes;
        manifest.push_str(&format!("{},{},{}\n", s.identity, s.domain_id, offset));
        for &v in s.image.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    atomic_write(&dir.join(BLOB_FILE), &blob)?;
    atomic_write(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`write_manifest`]. Malformed or truncated
/// input yields a parse error naming the offending manifest line; nothing
/// partial is returned.
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let parse = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    if blob.len() < 12 {
        return Err(parse(0, "image blob shorter than its shape header"));
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(blob[off..off + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (rd_u32(0), rd_u32(4), rd_u32(8));
    if h == 0 || w == 0 || c == 0 {
        return Err(parse(0, "image blob declares an empty shape"));
    }
    let image_bytes = h * w * c * 4;
    let data_section = &blob[12..];

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        Some((i, other)) => {
            return Err(parse(i + 1, &format!("bad header {other:?}")));
        }
        None => return Err(parse(1, "empty manifest")),
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut field = |name: &str| {
            parts
                .next()
                .ok_or_else(|| parse(lineno, &format!("missing field {name}")))
        };
        let identity: usize = field("id")?
            .parse()
            .map_err(|_| parse(lineno, "identity is not an integer"))?;
        let domain_id: usize = field("domain")?
            .parse()
            .map_err(|_| parse(lineno, "domain is not an integer"))?;
        let offset: usize = field("offset")?
            .parse()
            .map_err(|_| parse(lineno, "offset is not an integer"))?;
        if parts.next().is_some() {
            return Err(parse(lineno, "too many fields"));
        }
        if offset + image_bytes > data_section.len() {
            return Err(parse(lineno, "image data truncated"));
        }
        let mut data = Vec::with_capacity(h * w * c);
        for p in 0..h * w * c {
            let at = offset + p * 4;
            let v = f32::from_le_bytes(data_section[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(parse(lineno, "non-finite image value"));
            }
            data.push(v as f64);
        }
        samples.push(Sample {
            image: Tensor::new(vec![h, w, c], data)?,
            identity,
            domain_id,
        });
    }
    Ok(Dataset {
        samples,
        image_shape: (h, w, c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mgm::channel_stats;

    const SHAPE: (usize, usize, usize) = (8, 8, 4);

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec::preset(1);
        let a = generate_domain(7, 0, 4, 3, &spec, SHAPE).unwrap();
        let b = generate_domain(7, 0, 4, 3, &spec, SHAPE).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(8, 0, 4, 3, &spec, SHAPE).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn style_free_generation_collapses_to_prototypes() {
        let flat = DomainSpec {
            domain_id: 0,
            gain: vec![1.0; 4],
            bias: vec![0.0; 4],
            texture_scale: 0.0,
            noise_std: 0.0,
        };
        let other = DomainSpec { domain_id: 3, ..flat.clone() };
        let a = generate_domain(5, 0, 3, 2, &flat, SHAPE).unwrap();
        let b = generate_domain(5, 0, 3, 2, &other, SHAPE).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.identity, sb.identity);
            assert_eq!(sa.image, sb.image, "identity {}", sa.identity);
        }
    }

    #[test]
    fn bias_shift_moves_channel_means() {
        let base = DomainSpec {
            domain_id: 0,
            gain: vec![1.0; 4],
            bias: vec![0.0; 4],
            texture_scale: 0.0,
            noise_std: 0.0,
        };
        let delta = [0.5, -1.25, 2.0, 0.125];
        let shifted = DomainSpec {
            domain_id: 0,
            bias: delta.to_vec(),
            ..base.clone()
        };
        let a = generate_domain(3, 0, 2, 2, &base, SHAPE).unwrap();
        let b = generate_domain(3, 0, 2, 2, &shifted, SHAPE).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            let ma = channel_stats(&sa.image).unwrap().mean;
            let mb = channel_stats(&sb.image).unwrap().mean;
            for k in 0..4 {
                // f32 quantization bounds the error.
                assert!((mb.data()[k] - ma.data()[k] - delta[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn generation_rejects_tiny_counts() {
        let spec = DomainSpec::preset(0);
        assert!(generate_domain(1, 0, 1, 4, &spec, SHAPE).is_err());
        assert!(generate_domain(1, 0, 4, 1, &spec, SHAPE).is_err());
    }

    #[test]
    fn cross_domain_identity_consistency() {
        // Same identities in two styles: per-channel normalized contents of
        // same-identity samples stay strongly correlated.
        let a = generate_domain(11, 0, 4, 3, &DomainSpec::preset(0), SHAPE).unwrap();
        let b = generate_domain(11, 0, 4, 3, &DomainSpec::preset(1), SHAPE).unwrap();
        let normalize = |t: &Tensor| -> Vec<f64> {
            let stats = channel_stats(t).unwrap();
            let c = t.shape()[2];
            t.data()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let k = i % c;
                    (v - stats.mean.data()[k]) / stats.std.data()[k].max(1e-9)
                })
                .collect()
        };
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.identity, sb.identity);
            let (xa, xb) = (normalize(&sa.image), normalize(&sb.image));
            let n = xa.len() as f64;
            let (ma, mb) = (
                xa.iter().sum::<f64>() / n,
                xb.iter().sum::<f64>() / n,
            );
            let cov: f64 = xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = xa.iter().map(|x| (x - ma) * (x - ma)).sum();
            let vb: f64 = xb.iter().map(|y| (y - mb) * (y - mb)).sum();
            let corr = cov / (va.sqrt() * vb.sqrt());
            assert!(corr > 0.9, "identity {} corr {corr}", sa.identity);
        }
    }

    #[test]
    fn domains_separate_on_style_statistics() {
        // Nearest-centroid on per-channel (mean, std) image statistics: a
        // linear rule that must separate the preset styles.
        let domains: Vec<Dataset> = (0..3)
            .map(|d| generate_domain(13, 0, 10, 4, &DomainSpec::preset(d), SHAPE).unwrap())
            .collect();
        let feature = |t: &Tensor| -> Vec<f64> {
            let s = channel_stats(t).unwrap();
            s.mean.data().iter().chain(s.std.data()).cloned().collect()
        };
        let mut centroids = Vec::new();
        for ds in &domains {
            let feats: Vec<Vec<f64>> = ds.samples.iter().map(|s| feature(&s.image)).collect();
            let d = feats[0].len();
            let mut c = vec![0.0; d];
            for f in &feats {
                for (acc, v) in c.iter_mut().zip(f) {
                    *acc += v;
                }
            }
            for v in &mut c {
                *v /= feats.len() as f64;
            }
            centroids.push(c);
        }
        let mut correct = 0;
        let mut total = 0;
        for (truth, ds) in domains.iter().enumerate() {
            for s in &ds.samples {
                let f = feature(&s.image);
                let best = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        crate::numerics::euclidean(&f, a)
                            .partial_cmp(&crate::numerics::euclidean(&f, b))
                            .unwrap()
                    })
                    .unwrap()
                    .0;
                correct += (best == truth) as usize;
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "separability {acc}");
    }

    #[test]
    fn manifest_round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join(format!("bridgelab-manifest-{}", std::process::id()));
        let spec = DomainSpec::preset(2);
        let ds = generate_domain(17, 5, 3, 2, &spec, SHAPE).unwrap();
        write_manifest(&ds, &dir).unwrap();
        let back = read_manifest(&dir).unwrap();
        assert_eq!(ds, back);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = std::env::temp_dir().join(format!("bridgelab-empty-{}", std::process::id()));
        let ds = Dataset::empty(SHAPE);
        write_manifest(&ds, &dir).unwrap();
        let back = read_manifest(&dir).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.image_shape, SHAPE);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_blob_is_rejected_with_line_number() {
        let dir = std::env::temp_dir().join(format!("bridgelab-trunc-{}", std::process::id()));
        let spec = DomainSpec::preset(0);
        let ds = generate_domain(19, 0, 2, 2, &spec, SHAPE).unwrap();
        write_manifest(&ds, &dir).unwrap();
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() / 2]).unwrap();
        match read_manifest(&dir) {
            Err(Error::Parse { line, .. }) => assert!(line >= 2, "line {line}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_record_is_rejected_with_line_number() {
        let dir = std::env::temp_dir().join(format!("bridgelab-badrec-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let mut blob = Vec::new();
        for v in [2u32, 2, 1] {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        blob.extend_from_slice(&[0u8; 16]);
        fs::write(dir.join(BLOB_FILE), &blob).unwrap();
        fs::write(
            dir.join(MANIFEST_FILE),
            format!("{MANIFEST_HEADER}\n3,zero,0\n"),
        )
        .unwrap();
        match read_manifest(&dir) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
