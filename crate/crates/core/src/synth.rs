//! Deterministic synthetic data: CT intensity normalization, toy chest
//! volumes with planted nodules and look-alike distractors, weak labels,
//! candidate extraction, blob features and 2D mass images.
//!
//! Volumes are stored `[z, y, x]`; voxel `(x, y, z)` has its center at the
//! integer coordinates `(x, y, z)`.

use serde::{Deserialize, Serialize};

use crate::deepem::WeakLabel;
use crate::detection::Box3;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const HU_MIN: f64 = -1200.0;
pub const HU_MAX: f64 = 600.0;
/// Attempts per nodule before placement gives up.
pub const MAX_PLACEMENT_TRIES: usize = 1000;
/// Number of features produced by [`blob_features`].
pub const BLOB_FEATURE_LEN: usize = 12;

/// Clips Hounsfield units to `[-1200, 600]` and maps them linearly to `[0, 1]`.
pub fn normalize_ct(raw: &Tensor) -> Tensor {
    raw.map(|v| (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
        .expect("clamped values are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Extents {
    pub fn cube(n: usize) -> Self {
        Self { x: n, y: n, z: n }
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    /// Tensor shape `[z, y, x]`.
    pub fn shape(&self) -> Vec<usize> {
        vec![self.z, self.y, self.x]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter().zip(self.as_f64()).all(|(&v, n)| v >= 0.0 && v <= n - 1.0)
    }

    fn flat(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.y + y) * self.x + x
    }
}

/// Six axis-aligned stand-in lobes: two x-halves times three z-bands.
///
/// Locations follow the anatomical order right upper, right middle, right
/// lower, left upper, lingula, left lower. The "right" lung is the low-x half
/// (radiological convention) and "upper" is the low-z band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LobePartition {
    /// Fraction of the x extent where the right lung ends.
    pub x_split: f64,
    /// Fractions of the z extent separating the three bands.
    pub z_splits: [f64; 2],
}

impl Default for LobePartition {
    fn default() -> Self {
        Self {
            x_split: 0.5,
            z_splits: [1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

impl LobePartition {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.z_splits;
        if !(0.0 < self.x_split && self.x_split < 1.0 && 0.0 < a && a < b && b < 1.0) {
            return Err(Error::InvalidArgument(format!("invalid lobe partition {self:?}")));
        }
        Ok(())
    }

    /// Location in `1..=6` of a point inside the volume.
    pub fn locate(&self, p: [f64; 3], extents: &Extents) -> Result<u8> {
        if !extents.contains(p) {
            return Err(Error::InvalidArgument(format!(
                "point {p:?} lies outside the {extents:?} volume"
            )));
        }
        let [nx, _, nz] = extents.as_f64();
        let left = p[0] >= self.x_split * nx;
        let band = if p[2] < self.z_splits[0] * nz {
            0
        } else if p[2] < self.z_splits[1] * nz {
            1
        } else {
            2
        };
        Ok(1 + band + if left { 3 } else { 0 })
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut SplitMix64) -> usize {
        rng.int_range(self.min, self.max)
    }
}

/// Closed real interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut SplitMix64) -> f64 {
        rng.uniform(self.lo, self.hi)
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Structures that produce nodule-like candidates without being nodules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractors {
    /// Spherical blobs dimmer than a nodule.
    pub faint_blobs: CountRange,
    pub faint_amplitude: Interval,
    /// Bright ellipsoids elongated along one random axis.
    pub ellipsoids: CountRange,
    pub ellipsoid_elongation: Interval,
    /// Straight bright tubes.
    pub vessels: CountRange,
    pub vessel_radius: Interval,
    pub vessel_length: Interval,
}

impl Distractors {
    pub const NONE: Self = Self {
        faint_blobs: CountRange::new(0, 0),
        faint_amplitude: Interval::new(0.5, 0.5),
        ellipsoids: CountRange::new(0, 0),
        ellipsoid_elongation: Interval::new(2.0, 2.0),
        vessels: CountRange::new(0, 0),
        vessel_radius: Interval::new(1.5, 1.5),
        vessel_length: Interval::new(10.0, 10.0),
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub extents: Extents,
    pub nodules: CountRange,
    /// Nodule radius range in voxels.
    pub radius: Interval,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub distractors: Distractors,
    pub partition: LobePartition,
}

impl Default for Scenario {
    /// The reference 64³ scenario.
    fn default() -> Self {
        Self {
            seed: 0,
            extents: Extents::cube(64),
            nodules: CountRange::new(1, 3),
            radius: Interval::new(2.0, 5.0),
            noise: 0.25,
            distractors: Distractors {
                faint_blobs: CountRange::new(3, 6),
                faint_amplitude: Interval::new(0.3, 0.8),
                ellipsoids: CountRange::new(2, 4),
                ellipsoid_elongation: Interval::new(1.5, 2.5),
                vessels: CountRange::new(3, 5),
                vessel_radius: Interval::new(1.2, 2.5),
                vessel_length: Interval::new(10.0, 30.0),
            },
            partition: LobePartition::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let e = self.extents;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if e.x < 16 || e.y < 16 || e.z < 16 {
            return bad(format!("extents must be >= 16 per axis, got {e:?}"));
        }
        if !self.radius.valid() || self.radius.lo < 1.0 {
            return bad(format!("nodule radii must be >= 1, got {:?}", self.radius));
        }
        if self.nodules.min > self.nodules.max {
            return bad(format!("invalid nodule count range {:?}", self.nodules));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        let d = &self.distractors;
        for r in [d.faint_blobs, d.ellipsoids, d.vessels] {
            if r.min > r.max {
                return bad(format!("invalid distractor count range {r:?}"));
            }
        }
        for i in [
            d.faint_amplitude,
            d.ellipsoid_elongation,
            d.vessel_radius,
            d.vessel_length,
        ] {
            if !i.valid() || i.lo <= 0.0 {
                return bad(format!("invalid distractor interval {i:?}"));
            }
        }
        if d.faint_amplitude.hi > 1.0 {
            return bad("faint blob amplitude must stay below the nodule peak".into());
        }
        self.partition.validate()
    }

    pub fn rng(&self) -> SplitMix64 {
        SplitMix64::new(self.seed)
    }
}

/// Cosine taper: 1 at the center, 0 at and beyond `radius`.
pub fn radial_profile(r: f64, radius: f64) -> f64 {
    if r >= radius {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * r / radius).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedVolume {
    /// Shape `[z, y, x]`.
    pub volume: Tensor,
    pub extents: Extents,
    pub nodules: Vec<Box3>,
}

/// Writes `amplitude * shape(p)` into `field` over a bounding region, keeping
/// the larger of old and new values.
fn paint<F: Fn([f64; 3]) -> f64>(field: &mut [f64], e: &Extents, lo: [f64; 3], hi: [f64; 3], amplitude: f64, shape: F) {
    let clip = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (x0, x1) = (clip(lo[0].floor(), e.x), clip(hi[0].ceil(), e.x));
    let (y0, y1) = (clip(lo[1].floor(), e.y), clip(hi[1].ceil(), e.y));
    let (z0, z1) = (clip(lo[2].floor(), e.z), clip(hi[2].ceil(), e.z));
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let v = amplitude * shape([x as f64, y as f64, z as f64]);
                let i = e.flat(x, y, z);
                if v > field[i] {
                    field[i] = v;
                }
            }
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance from `p` to the segment `a..b`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 == 0.0 {
        0.0
    } else {
        (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

fn random_unit(rng: &mut SplitMix64) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Random integer center at least `margin` voxels from every face.
fn random_center(rng: &mut SplitMix64, e: &Extents, margin: f64) -> Option<[f64; 3]> {
    let m = margin.ceil() as usize;
    let axis = |rng: &mut SplitMix64, n: usize| {
        if 2 * m >= n {
            None
        } else {
            Some(rng.int_range(m, n - 1 - m) as f64)
        }
    };
    Some([axis(rng, e.x)?, axis(rng, e.y)?, axis(rng, e.z)?])
}

/// Generates one volume: nodules (peak 1, non-overlapping), distractors kept
/// clear of nodules, then Gaussian noise.
pub fn gen_volume(scenario: &Scenario, rng: &mut SplitMix64) -> Result<GeneratedVolume> {
    scenario.validate()?;
    let e = scenario.extents;
    let mut field = vec![0.0; e.voxels()];

    let count = scenario.nodules.sample(rng);
    let mut nodules: Vec<Box3> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = scenario.radius.sample(rng);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let Some(c) = random_center(rng, &e, radius + 1.0) else {
                break;
            };
            if nodules.iter().all(|n| dist(c, n.center()) > radius + n.d / 2.0 + 1.0) {
                placed = Some(c);
                break;
            }
        }
        let c = placed.ok_or(Error::Placement {
            wanted: count,
            tries: MAX_PLACEMENT_TRIES,
        })?;
        nodules.push(Box3::new(c[0], c[1], c[2], 2.0 * radius)?);
    }
    for n in &nodules {
        let (c, r) = (n.center(), n.d / 2.0);
        paint(&mut field, &e, c.map(|v| v - r), c.map(|v| v + r), 1.0, |p| {
            radial_profile(dist(p, c), r)
        });
    }

    // Distractors stay at least this far from any nodule surface.
    let clear_of_nodules =
        |p: [f64; 3], reach: f64| nodules.iter().all(|n| dist(p, n.center()) > n.d / 2.0 + reach + 2.0);
    let d = scenario.distractors;

    for _ in 0..d.faint_blobs.sample(rng) {
        let r = scenario.radius.sample(rng);
        let amp = d.faint_amplitude.sample(rng);
        if let Some(c) = random_center(rng, &e, r + 1.0).filter(|&c| clear_of_nodules(c, r)) {
            paint(&mut field, &e, c.map(|v| v - r), c.map(|v| v + r), amp, |p| {
                radial_profile(dist(p, c), r)
            });
        }
    }

    for _ in 0..d.ellipsoids.sample(rng) {
        let r = scenario.radius.sample(rng);
        let k = d.ellipsoid_elongation.sample(rng);
        let axis = random_unit(rng);
        let reach = r * k;
        if let Some(c) = random_center(rng, &e, reach + 1.0).filter(|&c| clear_of_nodules(c, reach)) {
            // Stretched by `k` along `axis`.
            let shape = |p: [f64; 3]| {
                let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                let along = v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2];
                let perp2 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - along * along).max(0.0);
                radial_profile((perp2 + (along / k).powi(2)).sqrt(), r)
            };
            paint(&mut field, &e, c.map(|v| v - reach), c.map(|v| v + reach), 1.0, shape);
        }
    }

    for _ in 0..d.vessels.sample(rng) {
        let r = d.vessel_radius.sample(rng);
        let half = d.vessel_length.sample(rng) / 2.0;
        let axis = random_unit(rng);
        if let Some(c) = random_center(rng, &e, r + 1.0) {
            let a = [c[0] - half * axis[0], c[1] - half * axis[1], c[2] - half * axis[2]];
            let b = [c[0] + half * axis[0], c[1] + half * axis[1], c[2] + half * axis[2]];
            let clear = nodules
                .iter()
                .all(|n| segment_distance(n.center(), a, b) > n.d / 2.0 + r + 2.0);
            if clear {
                let lo = [a[0].min(b[0]) - r, a[1].min(b[1]) - r, a[2].min(b[2]) - r];
                let hi = [a[0].max(b[0]) + r, a[1].max(b[1]) + r, a[2].max(b[2]) + r];
                paint(&mut field, &e, lo, hi, 1.0, |p| {
                    radial_profile(segment_distance(p, a, b), r)
                });
            }
        }
    }

    if scenario.noise > 0.0 {
        for v in field.iter_mut() {
            *v += scenario.noise * rng.normal();
        }
    }
    Ok(GeneratedVolume {
        volume: Tensor::new(e.shape(), field)?,
        extents: e,
        nodules,
    })
}

/// Central slice and lobe location of a ground-truth nodule.
pub fn derive_weak_label(gt: &Box3, extents: &Extents, partition: &LobePartition) -> Result<WeakLabel> {
    let loc = partition.locate(gt.center(), extents)?;
    WeakLabel::new(loc, gt.z.round() as usize, extents)
}

fn voxel(volume: &Tensor, e: &Extents, x: usize, y: usize, z: usize) -> f64 {
    volume.data()[e.flat(x, y, z)]
}

fn check_volume(volume: &Tensor) -> Result<Extents> {
    match volume.shape() {
        &[z, y, x] => Ok(Extents { x, y, z }),
        s => Err(Error::InvalidArgument(format!(
            "expected a [z, y, x] volume, got {s:?}"
        ))),
    }
}

/// Fixed-length descriptor of the region around `bbox`:
///
/// | index | feature |
/// |-------|---------|
/// | 0..3  | mean, max, variance inside the box |
/// | 3     | box mean minus the mean of the surrounding shell out to twice the size |
/// | 4..7  | center over extents, per axis |
/// | 7..11 | mean intensity in radial shells at `[0, 1/3, 2/3, 1, 3/2]` of the radius |
/// | 11    | anisotropy of the intensity-weighted second moments |
///
/// Regions are clipped to the volume.
pub fn blob_features(volume: &Tensor, bbox: &Box3) -> Result<Vec<f64>> {
    let e = check_volume(volume)?;
    let c = bbox.center();
    if !e.contains(c) {
        return Err(Error::InvalidArgument(format!(
            "box center {c:?} lies outside the volume"
        )));
    }
    let r = bbox.d / 2.0;
    let outer = bbox.d;
    let range = |center: f64, half: f64, n: usize| {
        let lo = (center - half).ceil().max(0.0) as usize;
        let hi = ((center + half).floor().max(0.0) as usize).min(n - 1);
        lo..=hi
    };

    let (mut n_in, mut sum_in, mut sum2_in, mut max_in) = (0usize, 0.0, 0.0, f64::NEG_INFINITY);
    let (mut n_shell, mut sum_shell) = (0usize, 0.0);
    let shell_edges = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.5].map(|f| f * r);
    let mut ring_sum = [0.0; 4];
    let mut ring_n = [0usize; 4];
    let mut samples: Vec<([f64; 3], f64)> = Vec::new();

    for z in range(c[2], outer, e.z) {
        for y in range(c[1], outer, e.y) {
            for x in range(c[0], outer, e.x) {
                let p = [x as f64, y as f64, z as f64];
                let v = voxel(volume, &e, x, y, z);
                let cheb = (0..3).map(|k| (p[k] - c[k]).abs()).fold(0.0, f64::max);
                if cheb <= r {
                    n_in += 1;
                    sum_in += v;
                    sum2_in += v * v;
                    max_in = max_in.max(v);
                } else {
                    n_shell += 1;
                    sum_shell += v;
                }
                let rr = dist(p, c);
                for k in 0..4 {
                    if rr >= shell_edges[k] && rr < shell_edges[k + 1] {
                        ring_sum[k] += v;
                        ring_n[k] += 1;
                    }
                }
                if rr <= r {
                    samples.push((p, v));
                }
            }
        }
    }
    if n_in == 0 {
        // Sub-voxel box: fall back to the nearest voxel.
        let v = voxel(
            volume,
            &e,
            c[0].round() as usize,
            c[1].round() as usize,
            c[2].round() as usize,
        );
        n_in = 1;
        sum_in = v;
        sum2_in = v * v;
        max_in = v;
    }
    let mean_in = sum_in / n_in as f64;
    let var_in = (sum2_in / n_in as f64 - mean_in * mean_in).max(0.0);
    let mean_shell = if n_shell > 0 {
        sum_shell / n_shell as f64
    } else {
        mean_in
    };
    let rings: Vec<f64> = (0..4)
        .map(|k| {
            if ring_n[k] > 0 {
                ring_sum[k] / ring_n[k] as f64
            } else {
                mean_in
            }
        })
        .collect();

    // Second moments of the above-background mass inside the sphere.
    let mut m = [0.0; 3];
    let mut w_total = 0.0;
    for (p, v) in &samples {
        let w = (v - mean_shell).max(0.0);
        w_total += w;
        for k in 0..3 {
            m[k] += w * (p[k] - c[k]).powi(2);
        }
    }
    let anisotropy = if w_total > 0.0 {
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        if hi + lo > 0.0 {
            (hi - lo) / (hi + lo)
        } else {
            0.0
        }
    } else {
        0.0
    };

    let dims = e.as_f64();
    let mut out = vec![mean_in, max_in, var_in, mean_in - mean_shell];
    out.extend((0..3).map(|k| c[k] / dims[k]));
    out.extend(rings);
    out.push(anisotropy);
    debug_assert_eq!(out.len(), BLOB_FEATURE_LEN);
    Ok(out)
}

/// Side of the resampled patch returned by [`patch_features`].
pub const PATCH_SIDE: usize = 5;

fn trilinear(volume: &Tensor, e: &Extents, p: [f64; 3]) -> f64 {
    let dims = [e.x, e.y, e.z];
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for k in 0..3 {
        let v = p[k].clamp(0.0, (dims[k] - 1) as f64);
        base[k] = (v.floor() as usize).min(dims[k].saturating_sub(2));
        frac[k] = v - base[k] as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let hi = (corner >> k) & 1 == 1;
            idx[k] = (base[k] + hi as usize).min(dims[k] - 1);
            w *= if hi { frac[k] } else { 1.0 - frac[k] };
        }
        if w != 0.0 {
            acc += w * voxel(volume, e, idx[0], idx[1], idx[2]);
        }
    }
    acc
}

/// Intensities resampled on a `PATCH_SIDE`³ grid spanning the box center
/// plus or minus one diameter, so every object is seen at a common scale.
/// Samples outside the volume take the nearest edge value. Ordered z, y, x.
pub fn patch_features(volume: &Tensor, bbox: &Box3) -> Result<Vec<f64>> {
    let e = check_volume(volume)?;
    let c = bbox.center();
    if !e.contains(c) {
        return Err(Error::InvalidArgument(format!(
            "box center {c:?} lies outside the volume"
        )));
    }
    let half = (PATCH_SIDE - 1) as f64 / 2.0;
    let step = bbox.d / half;
    let mut out = Vec::with_capacity(PATCH_SIDE.pow(3));
    for k in 0..PATCH_SIDE {
        for j in 0..PATCH_SIDE {
            for i in 0..PATCH_SIDE {
                let off = |t: usize| (t as f64 - half) * step;
                out.push(trilinear(volume, &e, [c[0] + off(i), c[1] + off(j), c[2] + off(k)]));
            }
        }
    }
    Ok(out)
}

/// Separable 3-tap mean filter; border voxels average their in-volume
/// neighbours only.
pub fn box_smooth3(volume: &Tensor) -> Result<Tensor> {
    let e = check_volume(volume)?;
    let mut cur = volume.data().to_vec();
    let dims = [e.x, e.y, e.z];
    let strides = [1, e.x, e.x * e.y];
    for axis in 0..3 {
        let (n, s) = (dims[axis], strides[axis]);
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / s) % n;
            let mut acc = cur[i];
            let mut cnt = 1.0;
            if pos > 0 {
                acc += cur[i - s];
                cnt += 1.0;
            }
            if pos + 1 < n {
                acc += cur[i + s];
                cnt += 1.0;
            }
            *out = acc / cnt;
        }
        cur = next;
    }
    Tensor::new(volume.shape().to_vec(), cur)
}

/// Candidate boxes at local maxima of the smoothed volume.
///
/// A voxel is a maximum when it exceeds its 26 neighbours that precede it in
/// storage order and is not below those that follow, so a flat plateau yields
/// one candidate. Diameters come from the half-maximum radius of the smoothed
/// profile along the six axis directions; for the cosine profile the
/// half-maximum sits at half the radius, so `d = 4 r_half`.
pub fn find_candidates(volume: &Tensor, threshold: f64) -> Result<Vec<(Box3, f64)>> {
    let e = check_volume(volume)?;
    let s = box_smooth3(volume)?;
    let sd = s.data();
    let mut out = Vec::new();
    for z in 0..e.z {
        for y in 0..e.y {
            for x in 0..e.x {
                let i = e.flat(x, y, z);
                let v = sd[i];
                if v < threshold {
                    continue;
                }
                let mut is_max = true;
                'nb: for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx < 0 || ny < 0 || nz < 0 || nx >= e.x as i64 || ny >= e.y as i64 || nz >= e.z as i64 {
                                continue;
                            }
                            let j = e.flat(nx as usize, ny as usize, nz as usize);
                            if (j < i && sd[j] >= v) || (j > i && sd[j] > v) {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let half = v / 2.0;
                let mut radii = 0.0;
                for (axis, sign) in [(0, 1i64), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)] {
                    let mut p = [x as i64, y as i64, z as i64];
                    let dims = [e.x as i64, e.y as i64, e.z as i64];
                    let mut prev = v;
                    let mut r = 0.0;
                    loop {
                        p[axis] += sign;
                        if p[axis] < 0 || p[axis] >= dims[axis] {
                            break;
                        }
                        let cur = sd[e.flat(p[0] as usize, p[1] as usize, p[2] as usize)];
                        if cur < half {
                            r += (prev - half) / (prev - cur);
                            break;
                        }
                        r += 1.0;
                        prev = cur;
                    }
                    radii += r;
                }
                let d = (4.0 * radii / 6.0).clamp(2.0, 48.0);
                out.push((Box3::new(x as f64, y as f64, z as f64, d)?, v));
            }
        }
    }
    Ok(out)
}

/// 2D test image: a bright elliptical mass on a darker textured background.
pub fn gen_mass_image(h: usize, w: usize, noise: f64, rng: &mut SplitMix64) -> Result<(Tensor, BinaryMask)> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "mass images need at least 8x8, got {h}x{w}"
        )));
    }
    let (fh, fw) = (h as f64, w as f64);
    let cy = rng.uniform(0.35 * fh, 0.65 * fh);
    let cx = rng.uniform(0.35 * fw, 0.65 * fw);
    let ry = rng.uniform(0.12 * fh, 0.25 * fh);
    let rx = rng.uniform(0.12 * fw, 0.25 * fw);
    let mut image = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let inside = ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2) <= 1.0;
            let base = if inside { 0.7 } else { 0.3 };
            image.push(base + noise * rng.normal());
            mask.push(inside as u8 as f64);
        }
    }
    Ok((
        Tensor::new(vec![h, w], image)?,
        BinaryMask::new(Tensor::new(vec![h, w], mask)?)?,
    ))
}
