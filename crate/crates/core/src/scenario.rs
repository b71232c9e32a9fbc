//! Synthetic multi-agent episodes.
//!
//! A world is a Voronoi partition of random sites, each region labelled with
//! one of `C` classes and painted with a class-dependent colour and texture.
//! Agents see `H × H` crops of it. The target agent's crop is blurred and
//! noised; the normal agents' crops are either unrelated regions plus one
//! hidden clean copy of the target view, or partially overlapping crops
//! aligned into the target frame.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::AgentId;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::Observation;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    #[default]
    HiddenTarget,
    AccuratePose,
    InaccuratePose,
    RandomExploration,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Self::HiddenTarget,
        Self::AccuratePose,
        Self::InaccuratePose,
        Self::RandomExploration,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Self::HiddenTarget => "hidden-target",
            Self::AccuratePose => "accurate-pose",
            Self::InaccuratePose => "inaccurate-pose",
            Self::RandomExploration => "random-exploration",
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown setting code {c}")))
    }

    /// Overlap settings exchange poses so views can be aligned.
    pub fn uses_pose(self) -> bool {
        self != Self::HiddenTarget
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// World side length `L`.
    pub world_size: usize,
    /// View side length `H`.
    pub view_size: usize,
    pub classes: usize,
    /// Agents per episode, the degraded one included.
    pub agents: usize,
    /// Voronoi sites per world.
    pub sites: usize,
    /// Odd blur kernel sizes to draw from.
    pub blur_kernels: Vec<usize>,
    /// Range of the additive noise standard deviation.
    pub noise_sigma: [f64; 2],
    /// One overlap-fraction range per normal agent (accurate and inaccurate
    /// pose settings).
    pub overlap_ranges: Vec<[f64; 2]>,
    pub shuffle_overlaps: bool,
    /// Largest alignment error per axis, in cells (inaccurate pose).
    pub pose_error: i64,
    pub episodes_per_world: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            world_size: 64,
            view_size: 16,
            classes: 6,
            agents: 5,
            sites: 48,
            blur_kernels: vec![1, 3, 5, 7],
            noise_sigma: [0.1, 0.4],
            overlap_ranges: vec![[0.5, 0.9], [0.1, 0.5], [0.0, 0.3], [0.0, 0.2]],
            shuffle_overlaps: true,
            pose_error: 2,
            episodes_per_world: 10,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let (l, h) = (self.world_size, self.view_size);
        if h < 8 || !h.is_power_of_two() {
            return Err(Error::Config(format!("view size must be a power of two >= 8, got {h}")));
        }
        if l < 4 * h {
            return Err(Error::Config(format!("world size {l} must be at least 4x the view size {h}")));
        }
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class count must lie in 2..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.agents < 2 {
            return Err(Error::Config("need at least 2 agents".into()));
        }
        if self.sites == 0 {
            return Err(Error::Config("need at least one Voronoi site".into()));
        }
        if self.blur_kernels.is_empty() {
            return Err(Error::Config("blur kernel list is empty".into()));
        }
        for &k in &self.blur_kernels {
            DegradeSpec { kernel: k, sigma: 0.0 }.validate(h)?;
        }
        let [lo, hi] = self.noise_sigma;
        if !(0.0..=hi).contains(&lo) || !hi.is_finite() {
            return Err(Error::Config(format!("bad noise range [{lo}, {hi}]")));
        }
        if self.overlap_ranges.len() != self.agents - 1 {
            return Err(Error::Config(format!(
                "{} overlap ranges for {} normal agents",
                self.overlap_ranges.len(),
                self.agents - 1
            )));
        }
        for &[a, b] in &self.overlap_ranges {
            if !(0.0 <= a && a <= b && b <= 1.0) {
                return Err(Error::Config(format!("bad overlap range [{a}, {b}]")));
            }
        }
        if self.pose_error < 0 || self.pose_error as usize >= h {
            return Err(Error::Config(format!("pose error {} outside [0, {h})", self.pose_error)));
        }
        if self.episodes_per_world == 0 {
            return Err(Error::Config("episodes per world must be positive".into()));
        }
        Ok(())
    }
}

pub const MAX_CLASSES: usize = 12;

const HUES: [[f64; 3]; 3] = [[0.8, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.3, 0.8]];
const TEXTURE_AMPLITUDE: f64 = 0.25;
const PIXEL_NOISE: f64 = 0.05;

/// Texture sign of class `c` at cell `(y, x)`: classes cycle through three
/// hues, and each further group of three adds a different ±1 pattern.
fn texture(c: usize, y: usize, x: usize) -> f64 {
    let alt = |v: usize| if v.is_multiple_of(2) { -1.0 } else { 1.0 };
    match c / 3 {
        0 => 0.0,
        1 => alt(x + y),
        2 => alt(y),
        _ => alt(x),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    size: usize,
    classes: usize,
    seed: u64,
    labels: Vec<usize>,
    appearance: Tensor,
}

impl World {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `L × L` class ids.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `3 × L × L`, values in `[0, 1]`.
    pub fn appearance(&self) -> &Tensor {
        &self.appearance
    }
}

/// Deterministic world with the default site density (48 sites per 64²).
pub fn generate_world(seed: u64, classes: usize, size: usize) -> Result<World> {
    generate_world_with_sites(seed, classes, size, (size * size * 3 / 256).max(2 * classes))
}

pub fn generate_world_with_sites(seed: u64, classes: usize, size: usize, sites: usize) -> Result<World> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!("class count must lie in 2..={MAX_CLASSES}, got {classes}")));
    }
    if size == 0 || sites == 0 {
        return Err(Error::Config("world and site count must be positive".into()));
    }
    let mut rng = substream(seed, "world");
    let l = size as f64;
    let pts: Vec<(f64, f64, usize)> = (0..sites)
        .map(|_| (rng.gen_range(0.0..l), rng.gen_range(0.0..l), rng.gen_range(0..classes)))
        .collect();
    let mut labels = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for &(py, px, c) in &pts {
                let d = (cy - py).powi(2) + (cx - px).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            labels[y * size + x] = best.1;
        }
    }
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid deviation");
    let mut app = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    let d = app.data_mut();
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let c = labels[y * size + x];
                let v = HUES[c % 3][ch] + TEXTURE_AMPLITUDE * texture(c, y, x) + noise.sample(&mut rng);
                d[ch * plane + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(World {
        size,
        classes,
        seed,
        labels,
        appearance: app,
    })
}

/// Crop of the world at column `x`, row `y`, and its labels.
pub fn render_view(world: &World, x: usize, y: usize, h: usize) -> Result<(Observation, Vec<usize>)> {
    let l = world.size;
    if x + h > l || y + h > l {
        return Err(Error::Config(format!("window ({x}, {y}) of size {h} leaves the {l}x{l} world")));
    }
    let mut view = Tensor::zeros(&[3, h, h]);
    let src = world.appearance.data();
    let dst = view.data_mut();
    for ch in 0..3 {
        for r in 0..h {
            let s = ch * l * l + (y + r) * l + x;
            dst[ch * h * h + r * h..ch * h * h + (r + 1) * h].copy_from_slice(&src[s..s + h]);
        }
    }
    let labels = (0..h)
        .flat_map(|r| world.labels[(y + r) * l + x..(y + r) * l + x + h].iter().copied())
        .collect();
    Ok((Observation::new(view, false)?, labels))
}

/// Fraction of a view's area shared by two equally sized windows.
pub fn overlap_fraction(a: (i64, i64), b: (i64, i64), h: usize) -> f64 {
    let h = h as i64;
    let w = (h - (a.0 - b.0).abs()).max(0);
    let v = (h - (a.1 - b.1).abs()).max(0);
    (w * v) as f64 / (h * h) as f64
}

/// Blur kernel size and noise level of one degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeSpec {
    pub kernel: usize,
    pub sigma: f64,
}

impl DegradeSpec {
    pub fn validate(&self, view: usize) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.kernel / 2 >= view {
            return Err(Error::Config(format!(
                "blur kernel must be odd and narrower than the view, got {}",
                self.kernel
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Self {
        let kernel = *cfg.blur_kernels.choose(rng).expect("validated non-empty");
        let [lo, hi] = cfg.noise_sigma;
        let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        Self { kernel, sigma }
    }
}

/// Normalised Gaussian taps with standard deviation `k / 4`.
pub fn gaussian_taps(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let s = k as f64 / 4.0;
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k).map(|t| (-(t as f64 - r).powi(2) / (2.0 * s * s)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Half-sample symmetric reflection of index `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

/// Separable Gaussian blur of each channel with reflective borders.
pub fn blur(t: &Tensor, kernel: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if kernel == 1 {
        return Ok(t.clone());
    }
    let taps = gaussian_taps(kernel);
    let r = (kernel / 2) as isize;
    let src = t.data();
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            for x in 0..w {
                tmp[ch * h * w + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &tap)| tap * row[reflect(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &tap)| tap * plane[reflect(y as isize + k as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// Blur, add Gaussian noise, clamp to `[0, 1]`.
pub fn degrade<R: Rng + ?Sized>(obs: &Observation, spec: DegradeSpec, rng: &mut R) -> Result<Observation> {
    spec.validate(obs.size())?;
    let mut t = blur(obs.grid(), spec.kernel)?;
    let noise = Normal::new(0.0, spec.sigma).expect("validated sigma");
    for v in t.data_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Observation::new(t, true)
}

/// Degradation with a freshly sampled spec.
pub fn degrade_random<R: Rng + ?Sized>(obs: &Observation, cfg: &ScenarioConfig, rng: &mut R) -> Result<Observation> {
    let spec = DegradeSpec::sample(cfg, rng);
    degrade(obs, spec, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub setting: Setting,
    /// Degraded view of the target agent (agent 0).
    pub target: Observation,
    /// The same view before degradation.
    pub clean_target: Observation,
    /// Row-major `H × H` ground-truth classes of the target view.
    pub labels: Vec<usize>,
    /// Views of agents `1..N`, already in the target frame.
    pub normals: Vec<Observation>,
    /// True overlap of each normal view with the target view.
    pub overlaps: Vec<f64>,
    pub best_agent: AgentId,
}

impl Episode {
    pub fn agents(&self) -> usize {
        self.normals.len() + 1
    }

    pub fn normal_id(pos: usize) -> AgentId {
        AgentId(pos + 1)
    }

    pub fn normal_index(id: AgentId) -> Option<usize> {
        id.0.checked_sub(1)
    }

    /// Recomputes the best agent from the episode contents alone.
    pub fn recompute_best_agent(&self) -> Option<AgentId> {
        if self.setting == Setting::HiddenTarget {
            let hits: Vec<usize> = (0..self.normals.len()).filter(|&i| self.normals[i] == self.clean_target).collect();
            return (hits.len() == 1).then(|| Self::normal_id(hits[0]));
        }
        let mut best = 0;
        for (i, &o) in self.overlaps.iter().enumerate() {
            if o > self.overlaps[best] {
                best = i;
            }
        }
        (self.overlaps[best] > 0.0).then(|| Self::normal_id(best))
    }
}

fn aligned_view(world: &World, tx: usize, ty: usize, h: usize, d: (i64, i64), e: (i64, i64)) -> Result<Observation> {
    let l = world.size;
    let src = world.appearance.data();
    let mut v = Tensor::zeros(&[3, h, h]);
    let dst = v.data_mut();
    let hi = h as i64;
    for u in 0..hi {
        for w in 0..hi {
            let (a, b) = (u - d.1 - e.1, w - d.0 - e.0);
            if (0..hi).contains(&a) && (0..hi).contains(&b) {
                let sy = (ty as i64 + u - e.1) as usize;
                let sx = (tx as i64 + w - e.0) as usize;
                for ch in 0..3 {
                    dst[ch * h * h + (u * hi + w) as usize] = src[ch * l * l + sy * l + sx];
                }
            }
        }
    }
    Observation::new(v, false)
}

/// One episode of `setting` drawn from `world`.
pub fn make_episode<R: Rng + ?Sized>(world: &World, setting: Setting, rng: &mut R, cfg: &ScenarioConfig) -> Result<Episode> {
    cfg.validate()?;
    let (l, h, n) = (world.size, cfg.view_size, cfg.agents);
    if world.classes != cfg.classes || l != cfg.world_size {
        return Err(Error::Config("world does not match the scenario configuration".into()));
    }
    if setting == Setting::HiddenTarget {
        let tx = rng.gen_range(0..=l - h);
        let ty = rng.gen_range(0..=l - h);
        let (clean, labels) = render_view(world, tx, ty, h)?;
        let mut normals = Vec::with_capacity(n - 1);
        while normals.len() < n - 2 {
            let x = rng.gen_range(0..=l - h);
            let y = rng.gen_range(0..=l - h);
            if x.abs_diff(tx) >= h || y.abs_diff(ty) >= h {
                normals.push(render_view(world, x, y, h)?.0);
            }
        }
        let best = rng.gen_range(0..n - 1);
        normals.insert(best, clean.clone());
        let mut overlaps = vec![0.0; n - 1];
        overlaps[best] = 1.0;
        let target = degrade_random(&clean, cfg, rng)?;
        return Ok(Episode {
            setting,
            target,
            clean_target: clean,
            labels,
            normals,
            overlaps,
            best_agent: Episode::normal_id(best),
        });
    }

    let mut pose_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let tx = rng.gen_range(h..=l - 2 * h);
    let ty = rng.gen_range(h..=l - 2 * h);
    let (clean, labels) = render_view(world, tx, ty, h)?;
    let fractions: Vec<f64> = if setting == Setting::RandomExploration {
        (0..n - 1).map(|_| rng.gen_range(0.0..1.0)).collect()
    } else {
        let mut f: Vec<f64> = cfg
            .overlap_ranges
            .iter()
            .map(|&[a, b]| if b > a { rng.gen_range(a..b) } else { a })
            .collect();
        if cfg.shuffle_overlaps {
            f.shuffle(rng);
        }
        f
    };
    let p = if setting == Setting::InaccuratePose { cfg.pose_error } else { 0 };
    let hf = h as f64;
    let mut normals = Vec::with_capacity(n - 1);
    let mut overlaps = Vec::with_capacity(n - 1);
    for f in fractions {
        let o = (hf * (1.0 - f.sqrt())).round() as i64;
        let sx = if rng.gen_bool(0.5) { 1 } else { -1 };
        let sy = if rng.gen_bool(0.5) { 1 } else { -1 };
        let d = (o * sx, o * sy);
        let e = (pose_rng.gen_range(-p..=p), pose_rng.gen_range(-p..=p));
        normals.push(aligned_view(world, tx, ty, h, d, e)?);
        overlaps.push(overlap_fraction((0, 0), d, h));
    }
    let mut best = 0;
    for (i, &o) in overlaps.iter().enumerate() {
        if o > overlaps[best] {
            best = i;
        }
    }
    if overlaps[best] == 0.0 {
        return Err(Error::Generation(format!("no normal agent overlaps the target view in {setting}")));
    }
    let target = degrade_random(&clean, cfg, rng)?;
    Ok(Episode {
        setting,
        target,
        clean_target: clean,
        labels,
        normals,
        overlaps,
        best_agent: Episode::normal_id(best),
    })
}

/// Half-open world-seed ranges for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSeeds {
    pub train: [u64; 2],
    pub val: [u64; 2],
    pub test: [u64; 2],
}

impl Default for SplitSeeds {
    fn default() -> Self {
        Self {
            train: [0, 60],
            val: [1_000, 1_020],
            test: [2_000, 2_020],
        }
    }
}

impl SplitSeeds {
    fn ranges(&self) -> [(&'static str, Range<u64>); 3] {
        [
            ("train", self.train[0]..self.train[1]),
            ("val", self.val[0]..self.val[1]),
            ("test", self.test[0]..self.test[1]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ranges();
        for (name, range) in &r {
            if range.is_empty() {
                return Err(Error::Config(format!("{name} seed range is empty")));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (&r[i].1, &r[j].1);
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Config(format!("{} and {} world seeds overlap", r[i].0, r[j].0)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 600,
            val: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub setting: Setting,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

fn build_set(cfg: &ScenarioConfig, setting: Setting, seeds: Range<u64>, size: usize, name: &str) -> Result<Vec<Episode>> {
    let per = cfg.episodes_per_world;
    let worlds = size.div_ceil(per) as u64;
    if worlds > seeds.end - seeds.start {
        return Err(Error::Config(format!(
            "{name} split needs {worlds} world seeds, range holds {}",
            seeds.end - seeds.start
        )));
    }
    let mut out = Vec::with_capacity(size);
    for seed in seeds.start..seeds.start + worlds {
        let world = generate_world_with_sites(seed, cfg.classes, cfg.world_size, cfg.sites)?;
        let mut rng = substream(seed, "episodes");
        for _ in 0..per.min(size - out.len()) {
            out.push(make_episode(&world, setting, &mut rng, cfg)?);
        }
    }
    Ok(out)
}

/// Train, validation and test episodes from disjoint world seeds.
pub fn build_split(cfg: &ScenarioConfig, setting: Setting, seeds: &SplitSeeds, sizes: &SplitSizes) -> Result<Split> {
    cfg.validate()?;
    seeds.validate()?;
    let [(_, tr), (_, va), (_, te)] = seeds.ranges();
    Ok(Split {
        setting,
        train: build_set(cfg, setting, tr, sizes.train, "train")?,
        val: build_set(cfg, setting, va, sizes.val, "val")?,
        test: build_set(cfg, setting, te, sizes.test, "test")?,
    })
}

pub const DATASET_MAGIC: &[u8; 8] = b"CLBDSET1";
pub const DATASET_VERSION: u32 = 1;

fn encode_obs(e: &mut Encoder, name: &str, o: &Observation) {
    e.u8(o.is_degraded() as u8);
    e.tensor(name, o.grid());
}

fn decode_obs(d: &mut Decoder<'_>) -> Result<Observation> {
    let degraded = d.u8("degraded flag")? != 0;
    let (_, t) = d.tensor()?;
    Observation::new(t, degraded).map_err(|e| Error::Format(e.to_string()))
}

fn encode_episode(e: &mut Encoder, ep: &Episode) {
    e.u8(ep.setting.code());
    e.usize(ep.best_agent.0);
    e.usize(ep.normals.len());
    for &o in &ep.overlaps {
        e.f64(o);
    }
    encode_obs(e, "target", &ep.target);
    encode_obs(e, "clean_target", &ep.clean_target);
    let h = ep.clean_target.size();
    let labels = Tensor::new(&[h, h], ep.labels.iter().map(|&c| c as f64).collect()).expect("labels match view");
    e.tensor("labels", &labels);
    for o in &ep.normals {
        encode_obs(e, "normal", o);
    }
}

fn decode_episode(d: &mut Decoder<'_>) -> Result<Episode> {
    let setting = Setting::from_code(d.u8("setting")?)?;
    let best_agent = AgentId(d.usize("best agent")?);
    let n = d.usize("normal count")?;
    let overlaps = (0..n).map(|_| d.f64("overlap")).collect::<Result<Vec<_>>>()?;
    let target = decode_obs(d)?;
    let clean_target = decode_obs(d)?;
    let (_, lt) = d.tensor()?;
    let labels = lt.data().iter().map(|&v| v as usize).collect();
    let normals = (0..n).map(|_| decode_obs(d)).collect::<Result<Vec<_>>>()?;
    if best_agent.0 == 0 || best_agent.0 > n {
        return Err(Error::Format(format!("best agent {best_agent} out of range")));
    }
    Ok(Episode {
        setting,
        target,
        clean_target,
        labels,
        normals,
        overlaps,
        best_agent,
    })
}

pub fn encode_split(split: &Split) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(DATASET_MAGIC);
    e.u32(DATASET_VERSION);
    e.u8(split.setting.code());
    for set in [&split.train, &split.val, &split.test] {
        e.usize(set.len());
        for ep in set {
            encode_episode(&mut e, ep);
        }
    }
    e.finish()
}

pub fn decode_split(bytes: &[u8]) -> Result<Split> {
    let mut d = Decoder::new(bytes);
    d.header(DATASET_MAGIC, DATASET_VERSION)?;
    let setting = Setting::from_code(d.u8("setting")?)?;
    let mut sets = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = d.usize("episode count")?;
        sets.push((0..n).map(|_| decode_episode(&mut d)).collect::<Result<Vec<_>>>()?);
    }
    d.finish()?;
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(Split { setting, train, val, test })
}

pub fn save_split(split: &Split, path: &Path) -> Result<()> {
    std::fs::write(path, encode_split(split))?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Split> {
    decode_split(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn worlds_are_deterministic() {
        assert_eq!(generate_world(3, 6, 64).unwrap(), generate_world(3, 6, 64).unwrap());
        assert_ne!(generate_world(3, 6, 64).unwrap(), generate_world(4, 6, 64).unwrap());
    }

    #[test]
    fn two_classes_both_occur() {
        let w = generate_world(1, 2, 128).unwrap();
        assert!(w.labels().contains(&0) && w.labels().contains(&1));
    }

    #[test]
    fn class_histogram_is_roughly_uniform() {
        let mut hist = [0usize; 6];
        for seed in 0..100 {
            for &c in generate_world(seed, 6, 64).unwrap().labels() {
                hist[c] += 1;
            }
        }
        let total: usize = hist.iter().sum();
        for (c, &n) in hist.iter().enumerate() {
            assert!(n as f64 / total as f64 > 0.05, "class {c} share {}", n as f64 / total as f64);
        }
    }

    #[test]
    fn render_matches_world_and_is_repeatable() {
        let w = generate_world(2, 6, 64).unwrap();
        let (a, la) = render_view(&w, 5, 9, 16).unwrap();
        let (b, lb) = render_view(&w, 5, 9, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la[3 * 16 + 2], w.labels()[12 * 64 + 7]);
        assert_eq!(a.grid().data()[2 * 256 + 3 * 16 + 2], w.appearance().data()[2 * 4096 + 12 * 64 + 7]);
        assert!(render_view(&w, 49, 0, 16).is_err());
    }

    #[test]
    fn overlap_geometry() {
        assert_eq!(overlap_fraction((0, 0), (16, 0), 16), 0.0);
        assert_eq!(overlap_fraction((0, 0), (40, 3), 16), 0.0);
        for delta in 0..=16 {
            assert_eq!(overlap_fraction((0, 0), (delta, 0), 16), (16 - delta) as f64 / 16.0);
        }
    }

    fn random_obs(seed: u64) -> Observation {
        let w = generate_world(seed, 6, 64).unwrap();
        render_view(&w, 10, 20, 16).unwrap().0
    }

    #[test]
    fn identity_degradation() {
        let o = random_obs(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = degrade(&o, DegradeSpec { kernel: 1, sigma: 0.0 }, &mut rng).unwrap();
        assert_eq!(d.grid(), o.grid());
        assert!(d.is_degraded());
    }

    #[test]
    fn blur_conserves_mean() {
        let o = random_obs(2);
        let mean = |t: &Tensor| t.sum() / t.len() as f64;
        for k in [3, 5, 7, 9, 15] {
            let b = blur(o.grid(), k).unwrap();
            assert!((mean(&b) - mean(o.grid())).abs() < 1e-6, "kernel {k}");
        }
    }

    #[test]
    fn blur_matches_direct_two_dimensional_convolution() {
        let o = random_obs(3);
        let k = 5;
        let taps = gaussian_taps(k);
        let b = blur(o.grid(), k).unwrap();
        let src = o.grid().data();
        for &(ch, y, x) in &[(0usize, 0usize, 0usize), (1, 7, 15), (2, 15, 3), (0, 8, 8)] {
            let mut want = 0.0;
            for (i, ty) in taps.iter().enumerate() {
                for (j, tx) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + i as isize - 2, 16);
                    let xx = reflect(x as isize + j as isize - 2, 16);
                    want += ty * tx * src[ch * 256 + yy * 16 + xx];
                }
            }
            assert!((b.grid_value(ch, y, x) - want).abs() < 1e-12);
        }
    }

    trait GridValue {
        fn grid_value(&self, c: usize, y: usize, x: usize) -> f64;
    }

    impl GridValue for Tensor {
        fn grid_value(&self, c: usize, y: usize, x: usize) -> f64 {
            let s = self.shape();
            self.data()[(c * s[1] + y) * s[2] + x]
        }
    }

    fn correlation(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn heavier_degradation_lowers_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut light, mut heavy) = (0.0, 0.0);
        for seed in 0..10 {
            let o = random_obs(seed);
            let l = degrade(&o, DegradeSpec { kernel: 1, sigma: 0.05 }, &mut rng).unwrap();
            let h = degrade(&o, DegradeSpec { kernel: 7, sigma: 0.4 }, &mut rng).unwrap();
            light += correlation(o.grid(), l.grid());
            heavy += correlation(o.grid(), h.grid());
        }
        assert!(heavy < light);
    }

    #[test]
    fn hidden_target_has_one_clean_copy() {
        let w = generate_world(5, 6, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ep = make_episode(&w, Setting::HiddenTarget, &mut rng, &cfg()).unwrap();
            let copies = ep.normals.iter().filter(|o| **o == ep.clean_target).count();
            assert_eq!(copies, 1);
            assert_eq!(ep.recompute_best_agent(), Some(ep.best_agent));
            assert!(ep.target.is_degraded());
        }
    }

    #[test]
    fn fixed_overlaps_pick_the_first_agent() {
        let w = generate_world(6, 6, 64).unwrap();
        let c = ScenarioConfig {
            overlap_ranges: vec![[0.9, 0.9], [0.2, 0.2], [0.1, 0.1], [0.0, 0.0]],
            shuffle_overlaps: false,
            ..cfg()
        };
        let ep = make_episode(&w, Setting::AccuratePose, &mut ChaCha8Rng::seed_from_u64(2), &c).unwrap();
        assert_eq!(ep.best_agent, AgentId(1));
        assert_eq!(ep.overlaps[3], 0.0);
        assert!(ep.normals[3].grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_zero_overlaps_fail_generation() {
        let w = generate_world(6, 6, 64).unwrap();
        let c = ScenarioConfig {
            overlap_ranges: vec![[0.0, 0.0]; 4],
            ..cfg()
        };
        let r = make_episode(&w, Setting::AccuratePose, &mut ChaCha8Rng::seed_from_u64(2), &c);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn zero_pose_noise_reduces_to_accurate_pose() {
        let w = generate_world(7, 6, 64).unwrap();
        let c = ScenarioConfig { pose_error: 0, ..cfg() };
        for seed in 0..10 {
            let a = make_episode(&w, Setting::AccuratePose, &mut ChaCha8Rng::seed_from_u64(seed), &c).unwrap();
            let mut b = make_episode(&w, Setting::InaccuratePose, &mut ChaCha8Rng::seed_from_u64(seed), &c).unwrap();
            b.setting = Setting::AccuratePose;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn aligned_views_agree_with_target_on_support() {
        let w = generate_world(8, 6, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = make_episode(&w, Setting::AccuratePose, &mut rng, &cfg()).unwrap();
        let clean = ep.clean_target.grid().data();
        for (o, &f) in ep.normals.iter().zip(&ep.overlaps) {
            let g = o.grid().data();
            let agree = (0..256).filter(|&i| (0..3).all(|c| g[c * 256 + i] == clean[c * 256 + i])).count();
            assert!(agree as f64 >= f * 256.0);
        }
    }

    #[test]
    fn split_defaults_and_determinism() {
        let sizes = SplitSizes {
            train: 30,
            val: 10,
            test: 10,
        };
        let a = build_split(&cfg(), Setting::RandomExploration, &SplitSeeds::default(), &sizes).unwrap();
        let b = build_split(&cfg(), Setting::RandomExploration, &SplitSeeds::default(), &sizes).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (30, 10, 10));
        assert_eq!(
            SplitSizes::default(),
            SplitSizes {
                train: 600,
                val: 200,
                test: 200
            }
        );
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let seeds = SplitSeeds {
            train: [0, 60],
            val: [50, 70],
            test: [100, 120],
        };
        let r = build_split(&cfg(), Setting::HiddenTarget, &seeds, &SplitSizes::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn container_round_trip_and_errors() {
        let sizes = SplitSizes { train: 4, val: 2, test: 2 };
        let split = build_split(&cfg(), Setting::InaccuratePose, &SplitSeeds::default(), &sizes).unwrap();
        let bytes = encode_split(&split);
        let back = decode_split(&bytes).unwrap();
        assert_eq!(back, split);
        assert_eq!(encode_split(&back), bytes);
        assert!(matches!(decode_split(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut newer = bytes.clone();
        newer[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_split(&newer), Err(Error::Version { found: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn degradation_stays_in_unit_range(seed in 0u64..500, k in prop::sample::select(vec![1usize, 3, 5, 7, 9]), sigma in 0.0f64..2.0) {
            let o = random_obs(seed % 20);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = degrade(&o, DegradeSpec { kernel: k, sigma }, &mut rng).unwrap();
            prop_assert!(d.grid().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn generated_best_agent_is_recomputable(seed in 0u64..200, s in 0usize..4) {
            let w = generate_world(seed, 6, 64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ep = make_episode(&w, Setting::ALL[s], &mut rng, &cfg()).unwrap();
            prop_assert_eq!(ep.recompute_best_agent(), Some(ep.best_agent));
            prop_assert!(ep.overlaps.iter().all(|o| (0.0..=1.0).contains(o)));
        }
    }
}
