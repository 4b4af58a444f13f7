//! Tensor-facing domain types, datasets, PNG ingestion and seeded splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use endouda_nn::Tensor;
use image::imageops::{self, FilterType};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Value range convention of an image batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Range {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[-1, 1]`, the VAE's tanh range.
    Signed,
}

impl Range {
    /// Dynamic range `L` used by SSIM stabilisers.
    pub fn dynamic_range(self) -> f64 {
        match self {
            Range::Unit => 1.0,
            Range::Signed => 2.0,
        }
    }

    fn bounds(self) -> (f32, f32) {
        match self {
            Range::Unit => (0.0, 1.0),
            Range::Signed => (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Ingest(format!("unknown domain tag `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Image batch `[batch, channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array4<f32>,
    range: Range,
}

impl ImageTensor {
    pub fn new(data: Array4<f32>, range: Range) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        if h != w {
            return Err(Error::Shape(format!("image must be square, got {h}x{w}")));
        }
        let (lo, hi) = range.bounds();
        // small tolerance for float round-off from range conversion
        if data.iter().any(|v| !v.is_finite() || *v < lo - 1e-5 || *v > hi + 1e-5) {
            return Err(Error::Shape(format!("image values outside the {range:?} range")));
        }
        Ok(Self { data, range })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn range(&self) -> Range {
        self.range
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn size(&self) -> usize {
        self.data.dim().2
    }

    pub fn to_signed(&self) -> ImageTensor {
        match self.range {
            Range::Signed => self.clone(),
            Range::Unit => ImageTensor {
                data: self.data.mapv(|v| v * 2.0 - 1.0),
                range: Range::Signed,
            },
        }
    }

    pub fn to_unit(&self) -> ImageTensor {
        match self.range {
            Range::Unit => self.clone(),
            Range::Signed => ImageTensor {
                data: self.data.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
                range: Range::Unit,
            },
        }
    }

    pub fn to_f64(&self) -> Array4<f64> {
        self.data.mapv(f64::from)
    }

    pub fn to_tensor(&self) -> Tensor {
        let shape = self.data.shape().to_vec();
        Tensor::new(&shape, self.data.iter().copied().collect()).expect("consistent shape")
    }

    /// Wraps a network output; values are clamped into `range` to absorb
    /// round-off at the tanh boundary.
    pub fn from_tensor(t: &Tensor, range: Range) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let (lo, hi) = range.bounds();
        let data = Array4::from_shape_vec((n, c, h, w), t.data().iter().map(|v| v.clamp(lo, hi)).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, range)
    }

    pub fn select(&self, indices: &[usize]) -> ImageTensor {
        ImageTensor {
            data: self.data.select(Axis(0), indices),
            range: self.range,
        }
    }

    pub fn image(&self, i: usize) -> Array3<f32> {
        self.data.index_axis(Axis(0), i).to_owned()
    }
}

/// Mask batch `[batch, 1, height, width]`: either binary ground truth or a
/// probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    data: Array4<f32>,
    probability: bool,
}

impl MaskTensor {
    pub fn binary(data: Array4<f32>) -> Result<Self> {
        Self::check_shape(&data)?;
        if data.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Shape("ground-truth mask must be binary".into()));
        }
        Ok(Self {
            data,
            probability: false,
        })
    }

    pub fn probability(data: Array4<f32>) -> Result<Self> {
        Self::check_shape(&data)?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("probability map must lie in [0, 1]".into()));
        }
        Ok(Self {
            data,
            probability: true,
        })
    }

    fn check_shape(data: &Array4<f32>) -> Result<()> {
        if data.dim().1 != 1 {
            return Err(Error::Shape(format!("mask must have one channel, got {}", data.dim().1)));
        }
        Ok(())
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn is_probability(&self) -> bool {
        self.probability
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn to_f64(&self) -> Array4<f64> {
        self.data.mapv(f64::from)
    }

    pub fn plane(&self, i: usize) -> Array2<f32> {
        self.data.slice(s![i, 0, .., ..]).to_owned()
    }
}

/// One image/mask pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub name: String,
    /// `[channel, height, width]`, unit range.
    pub image: Array3<f32>,
    /// `[height, width]`, values in {0, 1}.
    pub mask: Array2<f32>,
    pub domain: Domain,
    pub blob_count: Option<usize>,
}

impl Item {
    pub fn new(name: impl Into<String>, image: Array3<f32>, mask: Array2<f32>, domain: Domain) -> Result<Self> {
        let name = name.into();
        let (_, h, w) = image.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "item `{name}`: mask {:?} does not match image {h}x{w}",
                mask.dim()
            )));
        }
        Ok(Self {
            name,
            image,
            mask,
            domain,
            blob_count: None,
        })
    }
}

/// Ordered, immutable collection of items.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    split: Split,
}

impl Dataset {
    pub fn new(items: Vec<Item>, split: Split) -> Result<Self> {
        for it in &items {
            let (_, h, w) = it.image.dim();
            if it.mask.dim() != (h, w) {
                return Err(Error::Shape(format!("item `{}` image/mask disagree", it.name)));
            }
        }
        Ok(Self { items, split })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn names(&self) -> Vec<String> {
        self.items.iter().map(|i| i.name.clone()).collect()
    }

    /// Items whose name is not in `exclude`.
    pub fn without(&self, exclude: &[String]) -> Dataset {
        Dataset {
            items: self
                .items
                .iter()
                .filter(|it| !exclude.contains(&it.name))
                .cloned()
                .collect(),
            split: self.split,
        }
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        Dataset {
            items,
            split: self.split,
        }
    }

    pub fn image_batch(&self, indices: &[usize]) -> Result<ImageTensor> {
        let first = indices
            .first()
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (c, h, w) = first.image.dim();
        let mut out = Array4::<f32>::zeros((indices.len(), c, h, w));
        for (b, &i) in indices.iter().enumerate() {
            let img = &self.items[i].image;
            if img.dim() != (c, h, w) {
                return Err(Error::Shape(format!("item `{}` has a different size", self.items[i].name)));
            }
            out.index_axis_mut(Axis(0), b).assign(img);
        }
        ImageTensor::new(out, Range::Unit)
    }

    pub fn mask_batch(&self, indices: &[usize]) -> Result<MaskTensor> {
        let first = indices
            .first()
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (h, w) = first.mask.dim();
        let mut out = Array4::<f32>::zeros((indices.len(), 1, h, w));
        for (b, &i) in indices.iter().enumerate() {
            out.slice_mut(s![b, 0, .., ..]).assign(&self.items[i].mask);
        }
        MaskTensor::binary(out)
    }

    pub fn all_images(&self) -> Result<ImageTensor> {
        self.image_batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn all_masks(&self) -> Result<MaskTensor> {
        self.mask_batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Reads `root/images/*.png` with masks at `root/masks/<same name>.png`.
///
/// Images are bilinearly resized to `target_size` and scaled to unit range;
/// masks are resized nearest-neighbour and thresholded at 0.5. Items are
/// ordered by basename. Domain tags come from `root/manifest.csv` when it
/// exists, otherwise every item is tagged `source`.
pub fn load_dataset(root: &Path, split: Split, target_size: usize) -> Result<Dataset> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    let domains = read_manifest_domains(root)?;

    let mut names: Vec<(String, PathBuf)> = std::fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect();
    names.sort();

    let mut items = Vec::with_capacity(names.len());
    for (name, image_path) in names {
        let mask_path = mask_dir.join(format!("{name}.png"));
        if !mask_path.exists() {
            return Err(Error::MissingMask { name, path: mask_path });
        }
        let rgb = image::open(&image_path)?.to_rgb8();
        let rgb = if rgb.dimensions() != (target_size as u32, target_size as u32) {
            imageops::resize(&rgb, target_size as u32, target_size as u32, FilterType::Triangle)
        } else {
            rgb
        };
        let mut img = Array3::<f32>::zeros((3, target_size, target_size));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
            }
        }

        let gray = image::open(&mask_path)?.to_luma8();
        let gray = if gray.dimensions() != (target_size as u32, target_size as u32) {
            imageops::resize(&gray, target_size as u32, target_size as u32, FilterType::Nearest)
        } else {
            gray
        };
        let mut mask = Array2::<f32>::zeros((target_size, target_size));
        let mut non_binary = false;
        for (x, y, px) in gray.enumerate_pixels() {
            let v = px[0] as f32 / 255.0;
            non_binary |= v != 0.0 && v != 1.0;
            mask[[y as usize, x as usize]] = if v >= 0.5 { 1.0 } else { 0.0 };
        }
        if non_binary {
            log::warn!("mask `{name}` is not binary; re-binarized at 0.5");
        }
        let domain = domains.get(&name).copied().unwrap_or(Domain::Source);
        items.push(Item::new(name, img, mask, domain)?);
    }
    Dataset::new(items, split)
}

fn read_manifest_domains(root: &Path) -> Result<BTreeMap<String, Domain>> {
    let path = root.join(MANIFEST);
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    for rec in rdr.deserialize::<ManifestRow>() {
        let rec = rec?;
        out.insert(rec.name, rec.domain.parse()?);
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub name: String,
    pub domain: String,
    pub seed: u64,
    pub blob_count: usize,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `root/{images,masks}/<name>.png` plus `manifest.csv`.
pub fn write_dataset(root: &Path, dataset: &Dataset, seed: u64) -> Result<()> {
    let image_dir = root.join("images");
    let mask_dir = root.join("masks");
    for d in [&image_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = csv::Writer::from_path(root.join(MANIFEST))?;
    for it in dataset.items() {
        let (c, h, w) = it.image.dim();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                px[ch] = to_u8(it.image[[src, y as usize, x as usize]]);
            }
        }
        rgb.save(image_dir.join(format!("{}.png", it.name)))?;
        let mut gray = image::GrayImage::new(w as u32, h as u32);
        for (x, y, px) in gray.enumerate_pixels_mut() {
            px[0] = if it.mask[[y as usize, x as usize]] >= 0.5 { 255 } else { 0 };
        }
        gray.save(mask_dir.join(format!("{}.png", it.name)))?;
        manifest.serialize(ManifestRow {
            name: it.name.clone(),
            domain: it.domain.to_string(),
            seed,
            blob_count: it.blob_count.unwrap_or(0),
        })?;
    }
    manifest.flush().map_err(|e| Error::io(root.join(MANIFEST), e))?;
    Ok(())
}

/// Seeded shuffle followed by a partition into `fractions.len()` parts.
///
/// Part sizes are rounded to the nearest integer; the last part takes the
/// remainder.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config("fractions", "each fraction must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("fractions", format!("must sum to 1, got {total}")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let tags = [Split::Train, Split::Val, Split::Test];
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let len = if i + 1 == fractions.len() {
            n - start
        } else {
            ((f * n as f64).round() as usize).min(n - start)
        };
        if len == 0 {
            return Err(Error::EmptySplit(format!(
                "fraction {f} of {n} items leaves part {i} empty"
            )));
        }
        let items = order[start..start + len]
            .iter()
            .map(|&j| dataset.items[j].clone())
            .collect();
        parts.push(Dataset {
            items,
            split: tags[i.min(2)],
        });
        start += len;
    }
    Ok(parts)
}

/// Source data plus a labelled sample of target items, for the
/// target-fraction mixing protocol.
#[derive(Clone, Debug)]
pub struct MixedDataset {
    pub dataset: Dataset,
    /// Names of the target items that were mixed in; they must not be
    /// evaluated on.
    pub sampled_target: Vec<String>,
}

pub fn mix_target_into_source(source: &Dataset, target: &Dataset, fraction: f64, seed: u64) -> Result<MixedDataset> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(Error::config("fraction", format!("{fraction} is outside [0, 1]")));
    }
    let k = (fraction * target.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    let mut items = source.items.clone();
    let mut sampled = Vec::with_capacity(k);
    for i in chosen {
        sampled.push(target.items[i].name.clone());
        items.push(target.items[i].clone());
    }
    Ok(MixedDataset {
        dataset: Dataset {
            items,
            split: source.split,
        },
        sampled_target: sampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| {
                let img = Array3::from_elem((3, 4, 4), i as f32 / n as f32);
                let mut mask = Array2::zeros((4, 4));
                mask[[1, 1]] = 1.0;
                Item::new(format!("img{i:03}"), img, mask, Domain::Source).unwrap()
            })
            .collect();
        Dataset::new(items, Split::Train).unwrap()
    }

    #[test]
    fn split_ratios() {
        let d = toy(100);
        let p = split(&d, &[0.9, 0.1], 1).unwrap();
        assert_eq!((p[0].len(), p[1].len()), (90, 10));
        let p = split(&d, &[0.8, 0.2], 1).unwrap();
        assert_eq!((p[0].len(), p[1].len()), (80, 20));
        assert_eq!(p[1].split(), Split::Val);
        let mut names: Vec<_> = p.iter().flat_map(|d| d.names()).collect();
        names.sort();
        assert_eq!(names, d.names());
    }

    #[test]
    fn split_identity_partition() {
        let d = toy(10);
        let p = split(&d, &[1.0], 3).unwrap();
        assert_eq!(p.len(), 1);
        let mut names = p[0].names();
        names.sort();
        assert_eq!(names, d.names());
    }

    #[test]
    fn split_rejects_empty_part_and_bad_sum() {
        let d = toy(5);
        assert!(matches!(split(&d, &[0.95, 0.05], 0), Err(Error::EmptySplit(_))));
        assert!(split(&d, &[0.5, 0.4], 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let d = toy(30);
        assert_eq!(split(&d, &[0.5, 0.5], 9).unwrap(), split(&d, &[0.5, 0.5], 9).unwrap());
        assert_ne!(split(&d, &[0.5, 0.5], 9).unwrap(), split(&d, &[0.5, 0.5], 10).unwrap());
    }

    #[test]
    fn mixing_counts_and_determinism() {
        let src = toy(20);
        let tgt = Dataset::new(
            toy(40)
                .items()
                .iter()
                .map(|it| Item {
                    name: format!("t{}", it.name),
                    domain: Domain::Target,
                    ..it.clone()
                })
                .collect(),
            Split::Test,
        )
        .unwrap();
        let m0 = mix_target_into_source(&src, &tgt, 0.0, 1).unwrap();
        assert_eq!(m0.dataset, src);
        assert!(m0.sampled_target.is_empty());
        let m = mix_target_into_source(&src, &tgt, 0.25, 1).unwrap();
        assert_eq!(m.dataset.len(), 30);
        assert_eq!(m.sampled_target.len(), 10);
        let a = mix_target_into_source(&src, &tgt, 0.10, 5).unwrap();
        let b = mix_target_into_source(&src, &tgt, 0.10, 5).unwrap();
        assert_eq!(a.sampled_target, b.sampled_target);
        assert!(mix_target_into_source(&src, &tgt, 1.5, 1).is_err());
        assert!(mix_target_into_source(&src, &tgt, -0.1, 1).is_err());
        assert_eq!(tgt.without(&m.sampled_target).len(), 30);
    }

    #[test]
    fn item_rejects_shape_disagreement() {
        let img = Array3::zeros((3, 4, 4));
        let mask = Array2::zeros((4, 5));
        assert!(Item::new("x", img, mask, Domain::Source).is_err());
    }

    #[test]
    fn range_conversions() {
        let d = toy(2);
        let x = d.all_images().unwrap();
        let s = x.to_signed();
        assert_eq!(s.range(), Range::Signed);
        let back = s.to_unit();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(ImageTensor::new(Array4::from_elem((1, 3, 4, 4), 1.5), Range::Unit).is_err());
        assert!(ImageTensor::new(Array4::zeros((1, 2, 4, 4)), Range::Unit).is_err());
    }
}
