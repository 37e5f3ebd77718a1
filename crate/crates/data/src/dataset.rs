//! Dataset generation, the on-disk layout and guided/input splits.
//!
//! Layout under a root directory:
//! `images/%06d.ppm`, `masks/<attr>/%06d.ppm` for each local attribute, and
//! `manifest.tsv`. The manifest starts with `# key<TAB>value` metadata lines,
//! then a header row `index identity <attrs...> image <mask_attr...>` and one
//! row per sample with attributes as `0`/`1` and paths relative to the root.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diat_core::{Scalar, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attributes::{Attribute, Attributes, Marginals, Target};
use crate::error::{io_err, Error, Result};
use crate::ppm;
use crate::render::{self, FaceParams, IdentityParams, Nuisance};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DEFAULT_IDENTITIES: usize = 64;
/// Input-set size used when subsampling for transform training.
pub const DEFAULT_INPUT_LIMIT: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    pub n_identities: usize,
    pub marginals: Marginals,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { seed: 0, n: 2000, size: 32, n_identities: DEFAULT_IDENTITIES, marginals: Marginals::default() }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        if self.n_identities == 0 {
            return Err(Error::InvalidArgument("identity count must be at least 1".into()));
        }
        render::check_size(self.size)?;
        self.marginals.validate()
    }

    pub fn identity_params(&self, identity: usize) -> IdentityParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX - identity as u64);
        IdentityParams::sample(&mut rng)
    }

    /// Identity, labels and nuisance of sample `index`; a pure function of
    /// `(seed, index)` and the marginals.
    pub fn sample_spec(&self, index: usize) -> (usize, Attributes, FaceParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let identity = rng.gen_range(0..self.n_identities);
        let mut attrs = Attributes::default();
        for a in Attribute::ALL {
            attrs.set(a, rng.gen_bool(self.marginals.get(a)));
        }
        let nuisance = Nuisance::sample(&mut rng);
        (identity, attrs, FaceParams { identity: self.identity_params(identity), nuisance })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceSample<S> {
    pub index: usize,
    pub identity: usize,
    pub attributes: Attributes,
    /// `[3,S,S]` in `[0,1]`.
    pub image: Tensor<S>,
    /// `[1,S,S]` binary masks, in [`Attribute::LOCAL`] order.
    pub masks: [Tensor<S>; 2],
    /// Identity parameters followed by nuisance parameters.
    pub provenance: Vec<f64>,
}

impl<S: Scalar> SyntheticFaceSample<S> {
    /// The mask of a local attribute, `None` for global ones.
    pub fn mask(&self, attribute: Attribute) -> Option<&Tensor<S>> {
        Attribute::LOCAL.iter().position(|&a| a == attribute).map(|i| &self.masks[i])
    }
}

pub fn render_sample<S: Scalar>(cfg: &GeneratorConfig, index: usize) -> Result<SyntheticFaceSample<S>> {
    let (identity, attributes, params) = cfg.sample_spec(index);
    let r = render::render(cfg.size, &params, &attributes)?;
    let s = cfg.size;
    let image = Tensor::<f64>::new(&[3, s, s], r.image)?.cast();
    let [m0, m1] = r.masks;
    let masks = [Tensor::<f64>::new(&[1, s, s], m0)?.cast(), Tensor::<f64>::new(&[1, s, s], m1)?.cast()];
    let mut provenance = params.identity.to_vec();
    provenance.extend(params.nuisance.to_vec());
    Ok(SyntheticFaceSample { index, identity, attributes, image, masks, provenance })
}

/// An in-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub config: GeneratorConfig,
    pub samples: Vec<SyntheticFaceSample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn generate(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = (0..cfg.n).map(|i| render_sample(cfg, i)).collect::<Result<_>>()?;
        Ok(Self { config: cfg.clone(), samples })
    }

    /// Reads a dataset written by [`generate_dataset`], checking every file
    /// against the declared size.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        let cfg = manifest.config.clone();
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let image = ppm::read_image(&root.join(&e.image), Some(cfg.size))?;
            let masks = [
                ppm::read_mask(&root.join(&e.masks[0]), Some(cfg.size))?,
                ppm::read_mask(&root.join(&e.masks[1]), Some(cfg.size))?,
            ];
            let (_, _, params) = cfg.sample_spec(e.index);
            let mut provenance = params.identity.to_vec();
            provenance.extend(params.nuisance.to_vec());
            samples.push(SyntheticFaceSample {
                index: e.index,
                identity: e.identity,
                attributes: e.attributes,
                image,
                masks,
                provenance,
            });
        }
        Ok(Self { config: cfg, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Attributes> {
        self.samples.iter().map(|s| s.attributes).collect()
    }

    /// Stacks the images at `indices` into `[N,3,S,S]`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let items: Vec<Tensor<S>> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        Ok(Tensor::stack(&items)?)
    }

    /// Stacks the masks of a local attribute into `[N,1,S,S]`.
    pub fn masks(&self, indices: &[usize], attribute: Attribute) -> Result<Tensor<S>> {
        if !attribute.is_local() {
            return Err(Error::InvalidArgument(format!("{attribute} is global and has no mask")));
        }
        let items: Vec<Tensor<S>> =
            indices.iter().map(|&i| self.samples[i].mask(attribute).expect("local").clone()).collect();
        Ok(Tensor::stack(&items)?)
    }

    /// Sample indices whose identity falls in the training and held-out
    /// identity ranges of [`identity_split`].
    pub fn partition_by_identity(&self) -> (Vec<usize>, Vec<usize>) {
        let (train, _) = identity_split(self.config.n_identities);
        (0..self.len()).partition(|&i| train.contains(&self.samples[i].identity))
    }
}

/// Identities `0..k` train, `k..n` are held out, with `k = 80%` of `n`.
pub fn identity_split(n_identities: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let k = n_identities * 4 / 5;
    (0..k, k..n_identities)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub identity: usize,
    pub attributes: Attributes,
    pub image: PathBuf,
    /// In [`Attribute::LOCAL`] order.
    pub masks: [PathBuf; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub config: GeneratorConfig,
    pub entries: Vec<ManifestEntry>,
}

fn image_path(index: usize) -> PathBuf {
    PathBuf::from(format!("images/{index:06}.ppm"))
}

fn mask_path(attribute: Attribute, index: usize) -> PathBuf {
    PathBuf::from(format!("masks/{}/{index:06}.ppm", attribute.name()))
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<Attributes> {
        self.entries.iter().map(|e| e.attributes).collect()
    }

    pub fn to_tsv(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let marginals: Vec<String> = Attribute::ALL.iter().map(|&a| format!("{a}={}", c.marginals.get(a))).collect();
        writeln!(out, "# count\t{}", self.entries.len()).unwrap();
        writeln!(out, "# size\t{}", c.size).unwrap();
        writeln!(out, "# seed\t{}", c.seed).unwrap();
        writeln!(out, "# n_identities\t{}", c.n_identities).unwrap();
        writeln!(out, "# marginals\t{}", marginals.join(",")).unwrap();
        let mut header = vec!["index".to_string(), "identity".to_string()];
        header.extend(Attribute::ALL.iter().map(|a| a.name().to_string()));
        header.push("image".into());
        header.extend(Attribute::LOCAL.iter().map(|a| format!("mask_{a}")));
        writeln!(out, "{}", header.join("\t")).unwrap();
        for e in &self.entries {
            let mut row = vec![e.index.to_string(), e.identity.to_string()];
            row.extend(Attribute::ALL.iter().map(|&a| u8::from(e.attributes.get(a)).to_string()));
            row.push(e.image.display().to_string());
            row.extend(e.masks.iter().map(|p| p.display().to_string()));
            writeln!(out, "{}", row.join("\t")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = std::collections::BTreeMap::new();
        let mut header_seen = false;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line_no = no + 1;
            let bad = |reason: String| Error::Manifest { line: line_no, reason };
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('\t').ok_or_else(|| bad("metadata without a tab".into()))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !header_seen {
                if fields.first() != Some(&"index") {
                    return Err(bad("expected header row".into()));
                }
                header_seen = true;
                continue;
            }
            let want = 2 + Attribute::ALL.len() + 1 + Attribute::LOCAL.len();
            if fields.len() != want {
                return Err(bad(format!("{} fields, expected {want}", fields.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));
            let mut attributes = Attributes::default();
            for (i, &a) in Attribute::ALL.iter().enumerate() {
                let v = match fields[2 + i] {
                    "0" => false,
                    "1" => true,
                    other => return Err(bad(format!("bad flag {other:?} for {a}"))),
                };
                attributes.set(a, v);
            }
            let p = 2 + Attribute::ALL.len();
            entries.push(ManifestEntry {
                index: num(fields[0])?,
                identity: num(fields[1])?,
                attributes,
                image: PathBuf::from(fields[p]),
                masks: [PathBuf::from(fields[p + 1]), PathBuf::from(fields[p + 2])],
            });
        }
        let get = |k: &str| {
            meta.get(k).ok_or_else(|| Error::Manifest { line: 0, reason: format!("missing metadata {k:?}") })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Manifest { line: 0, reason: format!("bad metadata {k:?}") })
        };
        let mut marginals = Marginals::default();
        for item in get("marginals")?.split(',') {
            let (name, p) = item
                .split_once('=')
                .ok_or_else(|| Error::Manifest { line: 0, reason: format!("bad marginal {item:?}") })?;
            let p = p.parse().map_err(|_| Error::Manifest { line: 0, reason: format!("bad marginal {item:?}") })?;
            marginals.set(name.parse()?, p);
        }
        let config = GeneratorConfig {
            seed: num("seed")?,
            n: num("count")? as usize,
            size: num("size")? as usize,
            n_identities: num("n_identities")? as usize,
            marginals,
        };
        if entries.len() != config.n {
            return Err(Error::Manifest {
                line: 0,
                reason: format!("count says {} but {} rows follow", config.n, entries.len()),
            });
        }
        if let Some(e) = entries.iter().find(|e| e.identity >= config.n_identities) {
            return Err(Error::Manifest { line: 0, reason: format!("identity {} out of range", e.identity) });
        }
        Ok(Self { config, entries })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text)
    }
}

/// Renders `cfg` under `root`, writing the manifest last.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mkdir = |p: PathBuf| std::fs::create_dir_all(&p).map_err(io_err(&p));
    mkdir(root.join("images"))?;
    for a in Attribute::LOCAL {
        mkdir(root.join("masks").join(a.name()))?;
    }
    let mut entries = Vec::with_capacity(cfg.n);
    for index in 0..cfg.n {
        let s: SyntheticFaceSample<f64> = render_sample(cfg, index)?;
        let image = image_path(index);
        ppm::write_image(&root.join(&image), &s.image)?;
        let masks = Attribute::LOCAL.map(|a| mask_path(a, index));
        for (p, m) in masks.iter().zip(&s.masks) {
            ppm::write_mask(&root.join(p), m)?;
        }
        entries.push(ManifestEntry { index, identity: s.identity, attributes: s.attributes, image, masks });
    }
    let manifest = DatasetManifest { config: cfg.clone(), entries };
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_tsv()).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Guided set: samples already in the target state. Input set: the rest,
/// subsampled to at most `input_limit` (sorted, deterministic under `seed`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub guided: Vec<usize>,
    pub input: Vec<usize>,
    pub warnings: Vec<String>,
}

/// `candidates` restricts the split to a subset of sample indices.
pub fn split_guided_and_input(
    labels: &[Attributes],
    candidates: impl IntoIterator<Item = usize>,
    target: Target,
    input_limit: Option<usize>,
    seed: u64,
) -> Split {
    let (guided, mut input): (Vec<usize>, Vec<usize>) =
        candidates.into_iter().partition(|&i| target.satisfied_by(&labels[i]));
    let mut warnings = Vec::new();
    if input.is_empty() {
        warnings.push(format!("input set for {target} is empty: every sample already satisfies it"));
    }
    if guided.is_empty() {
        warnings.push(format!("guided set for {target} is empty"));
    }
    if let Some(limit) = input_limit.filter(|&l| l < input.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep: Vec<usize> = sample_indices(&mut rng, input.len(), limit).into_iter().map(|k| input[k]).collect();
        keep.sort_unstable();
        input = keep;
    }
    Split { guided, input, warnings }
}
