//! Extended morphological attribute profiles.
//!
//! Each leading principal component is quantized to 8 bits, a max-tree
//! (4-connectivity) is built over its upper level sets, and connected
//! components are pruned by area or by the standard deviation of the
//! original component values inside them. Filtering the max-tree gives
//! openings / thinnings; filtering the min-tree (the max-tree of the
//! inverted image) gives closings / thickenings.

use serde::{Deserialize, Serialize};

use crate::data::HyperCube;
use crate::error::{Error, Result};
use crate::numcore::{pca_components, Matrix, Pca};

/// 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                op: "GrayImage::new",
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if pixels.is_empty() {
            return Err(Error::Empty("GrayImage"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Maps `values.min()..=values.max()` linearly onto `0..=255`, rounding
    /// to the nearest level. A constant input maps to 0.
    pub fn quantize(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GrayImage::quantize input"));
        }
        let (lo, hi) = value_range(values);
        let pixels = values
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn inverted(&self) -> GrayImage {
        Self {
            pixels: self.pixels.iter().map(|&v| 255 - v).collect(),
            ..self.clone()
        }
    }
}

fn value_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Component tree of the upper level sets of an image.
///
/// Nodes are represented by canonical pixels: a pixel is canonical when it
/// is the root or its parent has a different level. Every other pixel points
/// at the canonical pixel of its own node. Attributes are stored at
/// canonical pixels and cover the whole subtree.
#[derive(Debug, Clone)]
pub struct MaxTree {
    height: usize,
    width: usize,
    /// Levels of the image the tree was built on (inverted for a min-tree).
    levels: Vec<u8>,
    parent: Vec<usize>,
    /// Pixels sorted by ascending level; every parent precedes its children.
    order: Vec<usize>,
    area: Vec<usize>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    dual: bool,
}

const UNSET: usize = usize::MAX;

fn find_root(zpar: &mut [usize], mut p: usize) -> usize {
    let mut root = p;
    while zpar[root] != root {
        root = zpar[root];
    }
    while zpar[p] != root {
        let next = zpar[p];
        zpar[p] = root;
        p = next;
    }
    root
}

impl MaxTree {
    /// Max-tree of `img`; attributes accumulate `values` (one per pixel).
    pub fn build(img: &GrayImage, values: &[f64]) -> Result<Self> {
        Self::build_oriented(img.clone(), values, false)
    }

    /// Min-tree of `img`, built as the max-tree of the inverted image.
    pub fn build_min(img: &GrayImage, values: &[f64]) -> Result<Self> {
        Self::build_oriented(img.inverted(), values, true)
    }

    fn build_oriented(img: GrayImage, values: &[f64], dual: bool) -> Result<Self> {
        let n = img.pixels.len();
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                op: "MaxTree attribute values",
                expected: n,
                actual: values.len(),
            });
        }
        let (h, w) = (img.height, img.width);
        let levels = img.pixels;

        // counting sort, stable in pixel index
        let mut counts = [0usize; 257];
        for &v in &levels {
            counts[v as usize + 1] += 1;
        }
        for i in 1..257 {
            counts[i] += counts[i - 1];
        }
        let mut order = vec![0; n];
        for (p, &v) in levels.iter().enumerate() {
            order[counts[v as usize]] = p;
            counts[v as usize] += 1;
        }

        let mut parent = vec![UNSET; n];
        let mut zpar = vec![UNSET; n];
        for &p in order.iter().rev() {
            parent[p] = p;
            zpar[p] = p;
            let (r, c) = (p / w, p % w);
            let neighbours = [
                (r > 0).then(|| p - w),
                (c > 0).then(|| p - 1),
                (c + 1 < w).then(|| p + 1),
                (r + 1 < h).then(|| p + w),
            ];
            for q in neighbours.into_iter().flatten() {
                if zpar[q] == UNSET {
                    continue;
                }
                let root = find_root(&mut zpar, q);
                if root != p {
                    parent[root] = p;
                    zpar[root] = p;
                }
            }
        }

        // canonicalize: point every pixel at the canonical pixel of its node
        for &p in &order {
            let q = parent[p];
            if levels[parent[q]] == levels[q] {
                parent[p] = parent[q];
            }
        }

        let mut area = vec![1usize; n];
        let mut sum = values.to_vec();
        let mut sum_sq: Vec<f64> = values.iter().map(|v| v * v).collect();
        for &p in order.iter().rev() {
            let q = parent[p];
            if q != p {
                area[q] += area[p];
                sum[q] += sum[p];
                sum_sq[q] += sum_sq[p];
            }
        }

        Ok(Self {
            height: h,
            width: w,
            levels,
            parent,
            order,
            area,
            sum,
            sum_sq,
            dual,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_min_tree(&self) -> bool {
        self.dual
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn is_canonical(&self, p: usize) -> bool {
        let q = self.parent[p];
        q == p || self.levels[q] != self.levels[p]
    }

    /// Canonical pixel of the node containing `p`.
    pub fn node_of(&self, p: usize) -> usize {
        if self.is_canonical(p) {
            p
        } else {
            self.parent[p]
        }
    }

    /// Canonical pixel of the parent node; the root is its own parent.
    pub fn parent_node(&self, node: usize) -> usize {
        self.parent[node]
    }

    pub fn node_count(&self) -> usize {
        (0..self.levels.len()).filter(|&p| self.is_canonical(p)).count()
    }

    /// Grey level of a node, in the orientation of the input image.
    pub fn level(&self, node: usize) -> u8 {
        if self.dual {
            255 - self.levels[node]
        } else {
            self.levels[node]
        }
    }

    pub fn area(&self, node: usize) -> usize {
        self.area[node]
    }

    /// Population standard deviation of the values in a node's component.
    pub fn std_dev(&self, node: usize) -> f64 {
        let n = self.area[node] as f64;
        let mean = self.sum[node] / n;
        (self.sum_sq[node] / n - mean * mean).max(0.0).sqrt()
    }

    fn attribute(&self, node: usize, attr: Attribute) -> f64 {
        match attr {
            Attribute::Area => self.area[node] as f64,
            Attribute::StdDev => self.std_dev(node),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Area,
    StdDev,
}

/// How nodes failing the attribute test are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningRule {
    /// Remove exactly the failing nodes.
    Direct,
    /// Remove a failing node only when none of its descendants is kept.
    Max,
    /// Remove a failing node together with all of its descendants.
    Min,
}

/// Filters the tree's image: pixels of removed nodes take the level of
/// their nearest kept ancestor. The root is always kept. A node fails when
/// its attribute is below `threshold`.
pub fn attribute_filter(tree: &MaxTree, attr: Attribute, threshold: f64, rule: PruningRule) -> GrayImage {
    let n = tree.levels.len();
    let root = tree.root();
    let passes = |p: usize| tree.attribute(p, attr) >= threshold;
    let mut keep = vec![false; n];
    match rule {
        PruningRule::Direct => {
            for (p, k) in keep.iter_mut().enumerate() {
                *k = tree.is_canonical(p) && passes(p);
            }
        }
        PruningRule::Max => {
            for &p in tree.order.iter().rev() {
                if tree.is_canonical(p) {
                    keep[p] |= passes(p);
                    if keep[p] && p != root {
                        keep[tree.parent[p]] = true;
                    }
                }
            }
        }
        PruningRule::Min => {
            for &p in &tree.order {
                if tree.is_canonical(p) {
                    keep[p] = passes(p) && (p == root || keep[tree.parent[p]]);
                }
            }
        }
    }
    keep[root] = true;

    let mut out = vec![0u8; n];
    for &p in &tree.order {
        out[p] = if tree.is_canonical(p) {
            if keep[p] {
                tree.levels[p]
            } else {
                out[tree.parent[p]]
            }
        } else {
            out[tree.parent[p]]
        };
    }
    if tree.dual {
        out.iter_mut().for_each(|v| *v = 255 - *v);
    }
    GrayImage {
        height: tree.height,
        width: tree.width,
        pixels: out,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmapConfig {
    pub pc_count: usize,
    /// Area thresholds in pixels.
    pub area_thresholds: Vec<f64>,
    /// Standard-deviation thresholds as fractions of each component's
    /// value range.
    pub std_thresholds: Vec<f64>,
    pub std_rule: PruningRule,
}

impl Default for EmapConfig {
    fn default() -> Self {
        Self {
            pc_count: 4,
            area_thresholds: vec![100.0, 500.0, 1000.0, 5000.0],
            std_thresholds: vec![0.025, 0.05, 0.075, 0.1],
            std_rule: PruningRule::Max,
        }
    }
}

impl EmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pc_count == 0 {
            return Err(Error::InvalidParameter("emap: pc_count must be positive".into()));
        }
        for (name, list) in [
            ("area_thresholds", &self.area_thresholds),
            ("std_thresholds", &self.std_thresholds),
        ] {
            if list.iter().any(|&t| !(t.is_finite() && t > 0.0)) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "emap: {name} must be positive and strictly increasing"
                )));
            }
        }
        Ok(())
    }

    /// Features per component: every threshold gives one max-tree and one
    /// min-tree image, plus the component itself.
    pub fn features_per_component(&self) -> usize {
        2 * (self.area_thresholds.len() + self.std_thresholds.len()) + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.pc_count * self.features_per_component()
    }
}

/// Attribute profile of one component image, one column per feature in the
/// order: std thinnings (descending threshold), std thickenings (descending),
/// the component itself, area openings (ascending), area closings
/// (ascending). Filtered columns hold 8-bit levels; the component column
/// holds the original values.
pub fn attribute_profile(
    height: usize,
    width: usize,
    component: &[f64],
    cfg: &EmapConfig,
) -> Result<Vec<Vec<f64>>> {
    let img = GrayImage::quantize(height, width, component)?;
    let max_tree = MaxTree::build(&img, component)?;
    let min_tree = MaxTree::build_min(&img, component)?;
    let (lo, hi) = value_range(component);
    let range = hi - lo;
    let as_real = |g: GrayImage| g.pixels.into_iter().map(f64::from).collect::<Vec<_>>();

    let mut out = Vec::with_capacity(cfg.features_per_component());
    for tree in [&max_tree, &min_tree] {
        for &t in cfg.std_thresholds.iter().rev() {
            out.push(as_real(attribute_filter(
                tree,
                Attribute::StdDev,
                t * range,
                cfg.std_rule,
            )));
        }
    }
    out.push(component.to_vec());
    for tree in [&max_tree, &min_tree] {
        for &t in &cfg.area_thresholds {
            out.push(as_real(attribute_filter(
                tree,
                Attribute::Area,
                t,
                PruningRule::Direct,
            )));
        }
    }
    Ok(out)
}

/// EMAP of a set of component images (`pixels × components`), each feature
/// min-max scaled to `[0, 1]` (a constant feature becomes 0).
pub fn emap_from_components(
    height: usize,
    width: usize,
    components: &Matrix,
    cfg: &EmapConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    if components.rows() != height * width {
        return Err(Error::DimensionMismatch {
            op: "emap components",
            expected: height * width,
            actual: components.rows(),
        });
    }
    let k = components.cols();
    let per = cfg.features_per_component();
    let mut out = Matrix::zeros(height * width, k * per);
    let t = components.transpose();
    for c in 0..k {
        for (f, column) in attribute_profile(height, width, t.row(c), cfg)?
            .into_iter()
            .enumerate()
        {
            let (lo, hi) = value_range(&column);
            let j = c * per + f;
            for (p, v) in column.into_iter().enumerate() {
                out.set(p, j, if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
            }
        }
    }
    Ok(out)
}

/// EMAP features of every pixel of a cube, `pixels × feature_dim`, built on
/// its leading `cfg.pc_count` principal components.
pub fn build_emap(cube: &HyperCube, cfg: &EmapConfig) -> Result<Matrix> {
    build_emap_on(cube, &emap_basis(cube, cfg)?, cfg)
}

/// Leading `cfg.pc_count` principal directions of a cube's scaled spectra.
pub fn emap_basis(cube: &HyperCube, cfg: &EmapConfig) -> Result<Pca> {
    cfg.validate()?;
    if cfg.pc_count > cube.bands() {
        return Err(Error::InvalidParameter(format!(
            "emap: pc_count {} exceeds the {} bands",
            cfg.pc_count,
            cube.bands()
        )));
    }
    pca_components(&cube.spectra(), cfg.pc_count)
}

/// EMAP of a cube whose component images come from projecting its spectra
/// on a given basis, so that several scenes share one feature space.
pub fn build_emap_on(cube: &HyperCube, basis: &Pca, cfg: &EmapConfig) -> Result<Matrix> {
    if basis.means.len() != cube.bands() {
        return Err(Error::DimensionMismatch {
            op: "emap basis bands",
            expected: basis.means.len(),
            actual: cube.bands(),
        });
    }
    if basis.components.cols() != cfg.pc_count {
        return Err(Error::DimensionMismatch {
            op: "emap basis components",
            expected: cfg.pc_count,
            actual: basis.components.cols(),
        });
    }
    let pcs = basis.project(&cube.spectra())?;
    emap_from_components(cube.height(), cube.width(), &pcs, cfg)
}
