//! Incremental canvas growth.
//!
//! A stream works on a window of `rows x grid` patches. The rightmost
//! window column is provisional: it is rendered with an open right border
//! and withheld. [`StreamState::extend_right`] regenerates it together with
//! `grid - 1` fresh columns, feeding its left border at every spatial
//! convolution from strips cached when the previous column was finalized.
//! With an open bottom the lowest window row is withheld the same way and
//! [`StreamState::extend_down`] starts a new band of rows whose top border
//! comes from cached bottom strips.
//!
//! Only edge strips of width `halo` are kept between steps, so the cache
//! grows with the frontier length and not with the finalized area.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{
    generate_block_with, sample_cell, BlockOptions, BlockOutput, LatentGrid, LatentMode, PaddingMode, RecordRequest,
};
use crate::error::{Error, Result};
use crate::halo::{pad_replicate, Border, Borders, Side, Sides};
use crate::imageio::to_rgb8;
use crate::network::Network;
use crate::tensor::{concat_h, concat_spatial, concat_w, view, Shape, Slice2D, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    /// Window width in patches.
    pub grid: usize,
    /// Window height in patches.
    pub rows: usize,
    /// Withhold the lowest window row so the canvas can grow downwards.
    pub open_bottom: bool,
    /// Cache bottom strips so [`StreamState::extend_down`] can continue
    /// below the current band. Requires `open_bottom`.
    pub grow_down: bool,
    pub padding: PaddingMode,
    pub mode: LatentMode,
    /// Keep the inputs and outputs of the most recent window for inspection.
    pub keep_replay: bool,
}

impl StreamConfig {
    pub fn new(grid: usize, rows: usize) -> Self {
        StreamConfig {
            grid,
            rows,
            open_bottom: false,
            grow_down: false,
            padding: PaddingMode::Local,
            mode: LatentMode::Gaussian,
            keep_replay: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.rows == 0 {
            return Err(Error::Stream("window needs at least one row and column".into()));
        }
        if self.open_bottom && self.rows < 2 {
            return Err(Error::Stream("an open bottom needs at least two window rows".into()));
        }
        if self.grow_down && !self.open_bottom {
            return Err(Error::Stream("growing down needs an open bottom".into()));
        }
        Ok(())
    }

    fn final_rows(&self) -> usize {
        if self.open_bottom {
            self.rows - 1
        } else {
            self.rows
        }
    }
}

/// Finalized pixels. Coordinates are canvas pixels of the top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitRegion {
    pub x: usize,
    pub y: usize,
    pub pixels: Tensor,
}

impl EmitRegion {
    pub fn width(&self) -> usize {
        self.pixels.shape().w
    }

    pub fn height(&self) -> usize {
        self.pixels.shape().h
    }
}

/// Everything that went into one window evaluation.
#[derive(Clone, Debug)]
pub struct WindowReplay {
    pub latents: LatentGrid,
    /// Borders per halo-consuming convolution.
    pub borders: Vec<Borders>,
    pub output: BlockOutput,
    /// Window column 0 regenerates a provisional column.
    pub regenerated_col: bool,
    /// Window row 0 regenerates a provisional row.
    pub regenerated_row: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounters {
    pub windows: usize,
    pub patches_evaluated: usize,
    pub cache_floats: usize,
    pub peak_cache_floats: usize,
    pub latent_floats: usize,
    pub emitted_pixels: usize,
}

pub struct StreamState<'n> {
    net: &'n Network,
    cfg: StreamConfig,
    seed: u64,
    patch: usize,
    halos: Vec<usize>,
    band: usize,
    band_row: usize,
    /// Canvas column of the provisional column of the current band.
    prov_col: usize,
    /// Per conv: stacked right strips of the last finalized column.
    right_cache: Vec<Tensor>,
    /// Per conv, per canvas column: bottom strips of the previous band.
    top_cache: Vec<Vec<Tensor>>,
    /// Same for the current band, finalized columns only.
    bottom_cache: Vec<Vec<Tensor>>,
    pending_bottom: Vec<Tensor>,
    prov_col_z: Vec<Tensor>,
    prov_row_z: Vec<Tensor>,
    prev_row_z: Vec<Tensor>,
    pending_row_z: Option<Tensor>,
    prov_col_pixels: Vec<Tensor>,
    prov_row_pixels: Vec<Tensor>,
    replay: Option<WindowReplay>,
    counters: StreamCounters,
    finished: bool,
}

/// Stream with a closed bottom border, one band of `rows` patch rows.
pub fn stream_init<'n>(net: &'n Network, seed: u64, rows: usize, grid: usize) -> Result<(StreamState<'n>, Vec<EmitRegion>)> {
    StreamState::init(net, seed, StreamConfig::new(grid, rows))
}

impl<'n> StreamState<'n> {
    pub fn init(net: &'n Network, seed: u64, cfg: StreamConfig) -> Result<(Self, Vec<EmitRegion>)> {
        cfg.validate()?;
        let spec = net.spec();
        spec.validate()?;
        let halos: Vec<usize> = spec.spatial_convs().iter().map(|c| c.halo).collect();
        let mut s = StreamState {
            net,
            cfg,
            seed,
            patch: spec.patch_extent(),
            top_cache: vec![Vec::new(); halos.len()],
            bottom_cache: vec![Vec::new(); halos.len()],
            halos,
            band: 0,
            band_row: 0,
            prov_col: 0,
            right_cache: Vec::new(),
            pending_bottom: Vec::new(),
            prov_col_z: Vec::new(),
            prov_row_z: Vec::new(),
            prev_row_z: Vec::new(),
            pending_row_z: None,
            prov_col_pixels: Vec::new(),
            prov_row_pixels: Vec::new(),
            replay: None,
            counters: StreamCounters::default(),
            finished: false,
        };
        let emitted = s.run_window(0)?;
        Ok((s, emitted))
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// Pixel extent of one patch.
    pub fn patch_extent(&self) -> usize {
        self.patch
    }

    pub fn counters(&self) -> StreamCounters {
        self.counters
    }

    /// Floats currently held in cached border strips.
    pub fn cache_floats(&self) -> usize {
        let sum = |v: &[Tensor]| v.iter().map(Tensor::len).sum::<usize>();
        sum(&self.right_cache)
            + sum(&self.pending_bottom)
            + self.top_cache.iter().map(|v| sum(v)).sum::<usize>()
            + self.bottom_cache.iter().map(|v| sum(v)).sum::<usize>()
    }

    /// Floats held in cached latents of provisional patches.
    pub fn latent_floats(&self) -> usize {
        self.prov_col_z.iter().chain(&self.prov_row_z).chain(&self.prev_row_z).chain(&self.pending_row_z).map(Tensor::len).sum()
    }

    /// Number of finalized patch columns in the current band.
    pub fn finalized_cols(&self) -> usize {
        self.prov_col
    }

    /// Canvas patch row at which the current band starts.
    pub fn band_row(&self) -> usize {
        self.band_row
    }

    pub fn last_window(&self) -> Option<&WindowReplay> {
        self.replay.as_ref()
    }

    /// Stops caching bottom strips and drops those already held. Used when
    /// the current band is known to be the last one.
    pub fn stop_growing_down(&mut self) {
        self.cfg.grow_down = false;
        self.bottom_cache.iter_mut().for_each(Vec::clear);
        self.pending_bottom.clear();
        self.counters.cache_floats = self.cache_floats();
    }

    pub fn extend_right(&mut self) -> Result<Vec<EmitRegion>> {
        self.check_live()?;
        if self.cfg.grid < 2 {
            return Err(Error::Stream("extending needs a window of at least two columns".into()));
        }
        self.run_window(self.prov_col)
    }

    /// Finalizes the provisional column of the current band as rendered,
    /// then starts the next band of rows at column 0.
    pub fn extend_down(&mut self) -> Result<Vec<EmitRegion>> {
        self.next_band(true)
    }

    /// Starts the next band. Without `flush` the provisional column of the
    /// current band is dropped and never emitted, which keeps every
    /// finalized pixel independent of how far the band was grown.
    pub fn next_band(&mut self, flush: bool) -> Result<Vec<EmitRegion>> {
        self.check_live()?;
        if !self.cfg.grow_down {
            return Err(Error::Stream("stream is not set up to grow down".into()));
        }
        let mut out = Vec::new();
        if flush {
            out.extend(self.flush_column()?);
        }
        self.top_cache = std::mem::replace(&mut self.bottom_cache, vec![Vec::new(); self.halos.len()]);
        self.prev_row_z = std::mem::take(&mut self.prov_row_z);
        self.pending_bottom.clear();
        self.pending_row_z = None;
        self.prov_row_pixels.clear();
        self.prov_col_pixels.clear();
        self.prov_col_z.clear();
        self.right_cache.clear();
        self.band += 1;
        self.band_row += self.cfg.rows - 1;
        self.prov_col = 0;
        out.extend(self.run_window(0)?);
        Ok(out)
    }

    /// Emits every remaining provisional patch as rendered and closes the
    /// stream.
    pub fn finish(&mut self) -> Result<Vec<EmitRegion>> {
        self.check_live()?;
        let mut out = self.flush_column()?;
        if self.cfg.open_bottom && !self.prov_row_pixels.is_empty() {
            let n = self.prov_row_pixels.len();
            let pixels = concat_spatial(1, n, &self.prov_row_pixels)?;
            out.push(self.emit(self.band_row + self.cfg.rows - 1, 0, pixels));
        }
        self.prov_row_pixels.clear();
        self.finished = true;
        Ok(out)
    }

    fn check_live(&self) -> Result<()> {
        if self.finished {
            return Err(Error::Stream("stream already finished".into()));
        }
        Ok(())
    }

    fn emit(&mut self, row: usize, col: usize, pixels: Tensor) -> EmitRegion {
        let s = pixels.shape();
        self.counters.emitted_pixels += s.h * s.w;
        EmitRegion { x: col * self.patch, y: row * self.patch, pixels }
    }

    fn flush_column(&mut self) -> Result<Vec<EmitRegion>> {
        if self.prov_col_pixels.is_empty() {
            return Ok(Vec::new());
        }
        let fin = self.cfg.final_rows();
        let pixels = concat_spatial(fin, 1, &self.prov_col_pixels[..fin])?;
        let region = self.emit(self.band_row, self.prov_col, pixels);
        for (j, strip) in std::mem::take(&mut self.pending_bottom).into_iter().enumerate() {
            self.bottom_cache[j].push(strip);
        }
        if self.cfg.open_bottom {
            self.prov_row_z.extend(self.pending_row_z.take());
            self.prov_row_pixels.push(self.prov_col_pixels[self.cfg.rows - 1].clone());
        }
        self.prov_col_pixels.clear();
        self.prov_col += 1;
        Ok(vec![region])
    }

    fn window_latents(&self, c0: usize) -> LatentGrid {
        let (rows, cols) = (self.cfg.rows, self.cfg.grid);
        let spec = self.net.spec();
        let mut z = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let cached = if c == 0 && c0 > 0 {
                    self.prov_col_z.get(r)
                } else if r == 0 && self.band > 0 {
                    self.prev_row_z.get(c0 + c)
                } else {
                    None
                };
                z.push(match cached {
                    Some(t) => t.clone(),
                    None => sample_cell(spec, self.seed, self.cfg.mode, self.band_row + r, c0 + c),
                });
            }
        }
        LatentGrid { rows, cols, origin: (self.band_row, c0), seed: self.seed, mode: self.cfg.mode, z }
    }

    fn top_cap(&self, j: usize, c0: usize) -> Result<Tensor> {
        let h = self.halos[j];
        let strips = &self.top_cache[j];
        let end = c0 + self.cfg.grid;
        if end > strips.len() {
            return Err(Error::Stream(format!(
                "band needs {end} finalized columns above, previous band finalized {}",
                strips.len()
            )));
        }
        let centre = concat_w(&strips[c0..end])?;
        let right_open = pad_replicate(&centre, h, Sides::only(Side::Right));
        if c0 == 0 {
            return Ok(pad_replicate(&right_open, h, Sides::only(Side::Left)));
        }
        let prev = &strips[c0 - 1];
        let ps = prev.shape();
        let margin = view(prev, Slice2D::new(0, ps.w - h, ps.h, h))?;
        concat_w(&[margin, right_open])
    }

    fn run_window(&mut self, c0: usize) -> Result<Vec<EmitRegion>> {
        let (rows, cols) = (self.cfg.rows, self.cfg.grid);
        let latents = self.window_latents(c0);
        let mut borders = Vec::with_capacity(self.halos.len());
        for j in 0..self.halos.len() {
            let mut b = Borders::replicate();
            if c0 > 0 {
                b.left = Border::Cached(self.right_cache[j].clone());
            }
            if self.band > 0 {
                b.top = Border::Cached(self.top_cap(j, c0)?);
            }
            borders.push(b);
        }
        let record = RecordRequest {
            right_col: (cols >= 2).then(|| cols - 2),
            bottom_row: self.cfg.grow_down.then(|| rows - 2),
        };
        let opts = BlockOptions { conv_borders: borders, record };
        let out = generate_block_with(&latents, self.net, self.cfg.padding, &opts)?;
        self.counters.windows += 1;
        self.counters.patches_evaluated += rows * cols;

        let fin = self.cfg.final_rows();
        let done = cols - 1;
        let mut emitted = Vec::new();
        if done > 0 {
            let mut parts = Vec::with_capacity(fin * done);
            for r in 0..fin {
                for c in 0..done {
                    parts.push(out.patch(r, c).clone());
                }
            }
            let pixels = concat_spatial(fin, done, &parts)?;
            emitted.push(self.emit(self.band_row, c0, pixels));

            self.right_cache = out.strips.iter().map(|s| concat_h(&s.right)).collect::<Result<_>>()?;
        }
        if self.cfg.grow_down {
            for (j, s) in out.strips.iter().enumerate() {
                self.bottom_cache[j].extend(s.bottom[..done].iter().cloned());
            }
            self.pending_bottom = out.strips.iter().map(|s| s.bottom[done].clone()).collect();
        }
        if self.cfg.open_bottom {
            for c in 0..done {
                self.prov_row_z.push(latents.cell(rows - 1, c).clone());
                self.prov_row_pixels.push(out.patch(rows - 1, c).clone());
            }
            self.pending_row_z = Some(latents.cell(rows - 1, done).clone());
        }
        self.prov_col_z = (0..rows).map(|r| latents.cell(r, done).clone()).collect();
        self.prov_col_pixels = (0..rows).map(|r| out.patch(r, done).clone()).collect();
        self.prov_col = c0 + done;

        if self.cfg.keep_replay {
            self.replay = Some(WindowReplay {
                latents,
                borders: opts.conv_borders,
                output: out,
                regenerated_col: c0 > 0,
                regenerated_row: self.band > 0,
            });
        }
        self.counters.cache_floats = self.cache_floats();
        self.counters.peak_cache_floats = self.counters.peak_cache_floats.max(self.counters.cache_floats);
        self.counters.latent_floats = self.latent_floats();
        Ok(emitted)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizedConfig {
    pub grid: usize,
    pub padding: PaddingMode,
    pub mode: LatentMode,
}

impl Default for SizedConfig {
    fn default() -> Self {
        SizedConfig { grid: crate::engine::DEFAULT_GRID, padding: PaddingMode::Local, mode: LatentMode::Gaussian }
    }
}

#[derive(Clone, Debug)]
pub struct SizedOutput {
    pub image: Tensor,
    pub counters: StreamCounters,
    /// Patch extent, which is also the spacing of patch seams.
    pub patch: usize,
}

/// Generates an `out_w x out_h` image by streaming `grid x grid` windows in
/// row-major bands. Every patch is finalized by regeneration, so the pixels
/// at any position depend only on the seed and not on the requested size.
/// Sizes that are not patch multiples are rounded up and cropped from the
/// top left.
pub fn generate_sized(net: &Network, seed: u64, out_w: usize, out_h: usize, cfg: SizedConfig) -> Result<SizedOutput> {
    generate_sized_with(net, seed, out_w, out_h, cfg, |_| Ok(()))
}

/// [`generate_sized`] that also hands every emitted region to `sink`.
pub fn generate_sized_with(
    net: &Network,
    seed: u64,
    out_w: usize,
    out_h: usize,
    cfg: SizedConfig,
    mut sink: impl FnMut(&EmitRegion) -> Result<()>,
) -> Result<SizedOutput> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Stream("output size must be positive".into()));
    }
    if cfg.grid < 2 {
        return Err(Error::Stream("streamed generation needs a grid of at least 2".into()));
    }
    let p = net.spec().patch_extent();
    let n = cfg.grid;
    let need_cols = out_w.div_ceil(p);
    let need_rows = out_h.div_ceil(p);
    let bands = need_rows.div_ceil(n - 1);
    let base_ext = need_cols.div_ceil(n - 1) - 1;

    let scfg = StreamConfig {
        grid: n,
        rows: n,
        open_bottom: true,
        grow_down: bands > 1,
        padding: cfg.padding,
        mode: cfg.mode,
        keep_replay: false,
    };
    let shape = Shape::new(1, net.spec().out_channels, out_h, out_w);
    let mut image = Tensor::zeros(shape);
    let mut paste = |r: &EmitRegion, sink: &mut dyn FnMut(&EmitRegion) -> Result<()>| -> Result<()> {
        if r.x >= out_w || r.y >= out_h {
            return Ok(());
        }
        let w = r.width().min(out_w - r.x);
        let h = r.height().min(out_h - r.y);
        let clipped = EmitRegion { x: r.x, y: r.y, pixels: view(&r.pixels, Slice2D::new(0, 0, h, w))? };
        sink(&clipped)?;
        for c in 0..shape.c {
            for y in 0..h {
                for x in 0..w {
                    image.set(0, c, r.y + y, r.x + x, clipped.pixels.at(0, c, y, x));
                }
            }
        }
        Ok(())
    };

    let (mut state, first) = StreamState::init(net, seed, scfg)?;
    for r in &first {
        paste(r, &mut sink)?;
    }
    for band in 0..bands {
        if band > 0 {
            for r in &state.next_band(false)? {
                paste(r, &mut sink)?;
            }
        }
        if band + 1 == bands {
            state.stop_growing_down();
        }
        // Each band must finalize one column more than the band below uses.
        for _ in 0..base_ext + (bands - 1 - band) {
            for r in &state.extend_right()? {
                paste(r, &mut sink)?;
            }
        }
    }
    Ok(SizedOutput { image, counters: state.counters(), patch: p })
}

#[derive(Serialize)]
struct IndexEntry {
    offset: u64,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
}

/// Appends emitted regions to a raw RGB8 file, one region after another in
/// row-major order, with a sidecar `<path>.idx` of JSON lines
/// `{"offset", "x", "y", "width", "height"}`.
pub struct StreamWriter {
    data: BufWriter<File>,
    index: BufWriter<File>,
    offset: u64,
    path: PathBuf,
}

impl StreamWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let open = |p: &Path| OpenOptions::new().create(true).write(true).truncate(true).open(p);
        Ok(StreamWriter {
            data: BufWriter::new(open(&path)?),
            index: BufWriter::new(open(&Self::index_path(&path))?),
            offset: 0,
            path,
        })
    }

    pub fn index_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".idx");
        PathBuf::from(s)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, r: &EmitRegion) -> Result<()> {
        let bytes = to_rgb8(&r.pixels)?;
        let entry = IndexEntry { offset: self.offset, x: r.x, y: r.y, width: r.width(), height: r.height() };
        self.data.write_all(&bytes)?;
        serde_json::to_writer(&mut self.index, &entry)?;
        self.index.write_all(b"\n")?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.data.flush()?;
        self.index.flush()?;
        Ok(())
    }
}
