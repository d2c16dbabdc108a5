//! Statistical-profile images.
//!
//! Each channel is a 2-D Gaussian kernel density surface of one feature pair
//! over a window, rasterized onto a 50×50 grid and max-normalized. A
//! per-channel bounding box marks where the density mass sits.

use std::io::{Read, Write};

use crate::error::{NtlError, Result};
use crate::features::{featurize_window, Feature, FeatureRow};
use crate::ingest::{candidate_starts, format_timestamp, parse_timestamp, slide_windows, CustomerSeries, Label};

pub const GRID: usize = 50;
pub const GRID_PIXELS: usize = GRID * GRID;
pub const CHANNELS: usize = 7;
pub const DEFAULT_SIGMA_PX: f64 = 1.5;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const MIN_BOX_EXTENT: u16 = 3;
pub const MAGIC: &[u8; 5] = b"NTLP1";
const KERNEL_REACH_SIGMAS: f64 = 9.2;

/// Closed numeric interval mapped onto a pixel axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRange {
    pub lo: f64,
    pub hi: f64,
}

impl AxisRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(NtlError::Config(format!("axis range [{lo}, {hi}] has no width")));
        }
        Ok(AxisRange { lo, hi })
    }

    /// Pixel-center coordinate in `[0, GRID-1]`, clamping out-of-range values.
    pub fn to_pixel(&self, v: f64) -> f64 {
        (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo) * (GRID - 1) as f64
    }
}

/// Fixed axis range for each feature.
pub fn default_range(f: Feature) -> AxisRange {
    let hi = match f {
        Feature::LoadRate | Feature::PNorm => 1.2,
        Feature::VoltageDeviation => 0.5,
        Feature::VoltageUd | Feature::CurrentUd => 1.0,
        Feature::PowerFactor | Feature::CalcPf => 1.0,
    };
    AxisRange { lo: 0.0, hi }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub index: usize,
    pub x_feature: Feature,
    pub y_feature: Feature,
    pub x_range: AxisRange,
    pub y_range: AxisRange,
}

impl ChannelSpec {
    pub fn new(index: usize, x: Feature, y: Feature) -> Self {
        ChannelSpec { index, x_feature: x, y_feature: y, x_range: default_range(x), y_range: default_range(y) }
    }
}

/// Channels 0-5 put load rate on x; channel 6 plots calculated against
/// reported power factor.
pub fn default_channel_plan() -> [ChannelSpec; CHANNELS] {
    use Feature::*;
    [
        ChannelSpec::new(0, LoadRate, VoltageDeviation),
        ChannelSpec::new(1, LoadRate, VoltageUd),
        ChannelSpec::new(2, LoadRate, CurrentUd),
        ChannelSpec::new(3, LoadRate, PowerFactor),
        ChannelSpec::new(4, LoadRate, PNorm),
        ChannelSpec::new(5, LoadRate, CalcPf),
        ChannelSpec::new(6, PowerFactor, CalcPf),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileConfig {
    pub specs: [ChannelSpec; CHANNELS],
    pub sigma_px: f64,
    pub threshold_frac: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            specs: default_channel_plan(),
            sigma_px: DEFAULT_SIGMA_PX,
            threshold_frac: DEFAULT_THRESHOLD,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_px > 0.0) {
            return Err(NtlError::Config(format!("sigma must be positive, got {}", self.sigma_px)));
        }
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return Err(NtlError::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold_frac
            )));
        }
        let mut seen = [false; CHANNELS];
        for s in &self.specs {
            if s.index >= CHANNELS || std::mem::replace(&mut seen[s.index], true) {
                return Err(NtlError::Config(format!("channel index {} repeated or out of range", s.index)));
            }
            AxisRange::new(s.x_range.lo, s.x_range.hi)?;
            AxisRange::new(s.y_range.lo, s.y_range.hi)?;
        }
        Ok(())
    }
}

/// A 50×50 raster stored row-major, row = y pixel, column = x pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub values: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { values: vec![0.0; GRID_PIXELS] }
    }
}

impl Grid {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * GRID + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Pixel rectangle with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl BBox {
    pub const FULL: BBox = BBox { x0: 0, y0: 0, x1: (GRID - 1) as u16, y1: (GRID - 1) as u16 };

    pub fn width(&self) -> u16 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u16 {
        self.y1 - self.y0 + 1
    }
}

/// Sum of isotropic Gaussian kernels evaluated at each pixel center.
///
/// Points are sorted before accumulation, so the result does not depend on
/// input order. The kernel factorizes into x and y terms; pixels where
/// either factor falls below 1e-18 are skipped.
pub fn render_channel(points: &[(f64, f64)], spec: &ChannelSpec, sigma_px: f64) -> Grid {
    let mut mapped: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| (spec.x_range.to_pixel(x), spec.y_range.to_pixel(y)))
        .collect();
    mapped.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let reach = KERNEL_REACH_SIGMAS * sigma_px;
    let span = |p: f64| {
        let lo = (p - reach).ceil().max(0.0) as usize;
        let hi = ((p + reach).floor().min((GRID - 1) as f64) as usize + 1).max(lo);
        lo..hi
    };
    let mut grid = Grid::default();
    let mut wx = [0.0f64; GRID];
    for &(px, py) in &mapped {
        let xs = span(px);
        for i in xs.clone() {
            let d = i as f64 - px;
            wx[i] = (-d * d * inv).exp();
        }
        for y in span(py) {
            let d = y as f64 - py;
            let ky = (-d * d * inv).exp();
            let row = &mut grid.values[y * GRID..(y + 1) * GRID];
            for (v, &kx) in row[xs.clone()].iter_mut().zip(&wx[xs.clone()]) {
                *v += ky * kx;
            }
        }
    }
    grid
}

/// Scale so the maximum pixel is 1; an all-zero grid is returned unchanged.
pub fn normalize_channel(grid: &Grid) -> Grid {
    let m = grid.max();
    if m <= 0.0 {
        return grid.clone();
    }
    Grid { values: grid.values.iter().map(|v| v / m).collect() }
}

fn pad_axis(lo: u16, hi: u16) -> (u16, u16) {
    let last = (GRID - 1) as i32;
    let (mut lo, mut hi) = (lo as i32, hi as i32);
    let need = MIN_BOX_EXTENT as i32 - (hi - lo + 1);
    if need > 0 {
        lo -= need / 2;
        hi += need - need / 2;
        if lo < 0 {
            hi -= lo;
            lo = 0;
        }
        if hi > last {
            lo -= hi - last;
            hi = last;
        }
    }
    (lo.max(0) as u16, hi.min(last) as u16)
}

/// Tightest rectangle around pixels strictly above `threshold_frac`,
/// padded to a 3-pixel minimum extent. Falls back to the full image when no
/// pixel qualifies.
pub fn find_bbox(grid: &Grid, threshold_frac: f64) -> BBox {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (idx, &v) in grid.values.iter().enumerate() {
        if v > threshold_frac {
            let (x, y) = (idx % GRID, idx / GRID);
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    let Some((x0, y0, x1, y1)) = bounds else {
        return BBox::FULL;
    };
    let (x0, x1) = pad_axis(x0 as u16, x1 as u16);
    let (y0, y1) = pad_axis(y0 as u16, y1 as u16);
    BBox { x0, y0, x1, y1 }
}

/// Seven-channel profile image of one window: the network's input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperImage {
    pub customer_id: String,
    pub window_start: i64,
    pub label: Label,
    /// `CHANNELS × GRID × GRID` values in `[0, 1]`, channel-major.
    pub channels: Vec<f32>,
    pub bboxes: [BBox; CHANNELS],
    /// Usable points per channel. Not part of the on-disk format.
    pub point_counts: [u32; CHANNELS],
}

impl SuperImage {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c * GRID_PIXELS..(c + 1) * GRID_PIXELS]
    }

    pub fn sample_id(&self) -> String {
        format!("{}@{}", self.customer_id, self.window_start)
    }

    pub fn file_name(&self) -> String {
        let safe: String = self
            .customer_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}_{}.ntlp", self.window_start)
    }

    pub fn encode<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in &self.channels {
            w.write_all(&v.to_le_bytes())?;
        }
        for b in &self.bboxes {
            for c in [b.x0, b.y0, b.x1, b.y1] {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        w.write_all(&[self.label.to_byte()])?;
        for s in [self.customer_id.clone(), format_timestamp(self.window_start)] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        Ok(())
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let bad = |what: &str| NtlError::Format(format!("super-image decode: {what}"));
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut buf = vec![0u8; CHANNELS * GRID_PIXELS * 4];
        r.read_exact(&mut buf)?;
        let channels: Vec<f32> =
            buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut coords = [0u8; CHANNELS * 8];
        r.read_exact(&mut coords)?;
        let mut bboxes = [BBox::FULL; CHANNELS];
        for (b, c) in bboxes.iter_mut().zip(coords.chunks_exact(8)) {
            let v = |i: usize| u16::from_le_bytes([c[2 * i], c[2 * i + 1]]);
            *b = BBox { x0: v(0), y0: v(1), x1: v(2), y1: v(3) };
            if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 as usize >= GRID || b.y1 as usize >= GRID {
                return Err(bad("bounding box out of range"));
            }
        }
        let mut lb = [0u8; 1];
        r.read_exact(&mut lb)?;
        let label = Label::from_byte(lb[0]).ok_or_else(|| bad("bad label byte"))?;
        let mut read_str = || -> Result<String> {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut s = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut s)?;
            String::from_utf8(s).map_err(|_| bad("id is not UTF-8"))
        };
        let customer_id = read_str()?;
        let window_start = parse_timestamp(&read_str()?)?;
        Ok(SuperImage { customer_id, window_start, label, channels, bboxes, point_counts: [0; CHANNELS] })
    }

    /// Grey-scale PNG of one channel, high y values at the top.
    pub fn write_png<W: Write>(&self, c: usize, w: W) -> Result<()> {
        let mut enc = png::Encoder::new(w, GRID as u32, GRID as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| NtlError::Format(e.to_string()))?;
        let ch = self.channel(c);
        let mut data = Vec::with_capacity(GRID_PIXELS);
        for y in (0..GRID).rev() {
            for x in 0..GRID {
                data.push((ch[y * GRID + x] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        writer.write_image_data(&data).map_err(|e| NtlError::Format(e.to_string()))?;
        Ok(())
    }
}

/// Render, normalize and box every channel of a window.
pub fn build_super_image(
    rows: &[FeatureRow],
    config: &ProfileConfig,
    label: Label,
    customer_id: &str,
    window_start: i64,
) -> SuperImage {
    let mut channels = vec![0.0f32; CHANNELS * GRID_PIXELS];
    let mut bboxes = [BBox::FULL; CHANNELS];
    let mut point_counts = [0u32; CHANNELS];
    for spec in &config.specs {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| Some((r.get(spec.x_feature)?, r.get(spec.y_feature)?)))
            .collect();
        let grid = normalize_channel(&render_channel(&points, spec, config.sigma_px));
        let c = spec.index;
        for (dst, src) in channels[c * GRID_PIXELS..(c + 1) * GRID_PIXELS].iter_mut().zip(&grid.values) {
            *dst = *src as f32;
        }
        bboxes[c] = find_bbox(&grid, config.threshold_frac);
        point_counts[c] = points.len() as u32;
    }
    SuperImage { customer_id: customer_id.to_string(), window_start, label, channels, bboxes, point_counts }
}

/// Window, featurize and render one customer's series. Returns the images
/// and the number of window positions skipped as incomplete.
pub fn render_series(
    series: &CustomerSeries,
    config: &ProfileConfig,
    window_days: u32,
    step_days: u32,
) -> Result<(Vec<SuperImage>, usize)> {
    let windows = slide_windows(series, window_days, step_days)?;
    let skipped = candidate_starts(series, window_days, step_days).len() - windows.len();
    let images = windows
        .iter()
        .map(|w| {
            let rows = featurize_window(w, &series.meta);
            build_super_image(&rows, config, series.meta.label, &series.meta.customer_id, w.start)
        })
        .collect();
    Ok((images, skipped))
}
