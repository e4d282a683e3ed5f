use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use lpad_core::engine::{generate_block, sample_latent_grid, LatentMode, PaddingMode, DEFAULT_GRID};
use lpad_core::imageio::{encode_gray_png, encode_png, encode_raw, read_image};
use lpad_core::metrics::{diversity_map, patch_seams, patch_stats, seam_metric, Seam, SeamConfig};
use lpad_core::netspec::{build_texture_generator, ConvPadding, NetworkSpec, DEFAULT_Z_CHANNELS};
use lpad_core::network::Network;
use lpad_core::stream::{generate_sized_with, SizedConfig, StreamWriter};
use lpad_core::tensor::{max_abs_diff, Tensor};
use lpad_core::tiled::{conv_stack, min_tile, split_extent, sr_stack, tile_apply, TileMode, TilePlan};
use lpad_core::weights::{load_weights, to_bytes};

#[derive(Debug, Parser)]
#[command(name = "lpad", version, about = "Seam-free patch-by-patch convolutional inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a texture of any size by streaming patch windows.
    Generate(GenerateArgs),
    /// Run an image-to-image network over a tiled input.
    TileApply(TileArgs),
    /// Per-pixel standard deviation over many generated samples.
    Diversity(DiversityArgs),
    /// Write a weight file with random parameters.
    RandomWeights(RandomArgs),
    /// Print the network stored in a weight file.
    Info {
        #[arg(long)]
        weights: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Padding {
    Local,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Gaussian,
    Uniform,
    Periodic,
}

impl From<Padding> for PaddingMode {
    fn from(p: Padding) -> Self {
        match p {
            Padding::Local => PaddingMode::Local,
            Padding::Zero => PaddingMode::ZeroAblation,
        }
    }
}

impl From<Mode> for LatentMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Gaussian => LatentMode::Gaussian,
            Mode::Uniform => LatentMode::Uniform,
            Mode::Periodic => LatentMode::periodic(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Size {
    w: usize,
    h: usize,
}

fn parse_size(s: &str) -> Result<Size, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok(Size { w, h })
}

#[derive(Debug, clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output size in pixels, e.g. 384x384.
    #[arg(long, value_parser = parse_size)]
    size: Size,
    /// Window width and height in patches.
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, value_enum, default_value = "local")]
    padding: Padding,
    #[arg(long, value_enum, default_value = "gaussian")]
    mode: Mode,
    /// Comma-separated: seams, stats.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Output image; `.png` for 8-bit RGB, anything else for raw floats.
    #[arg(long)]
    out: PathBuf,
    /// Also append finalized regions to a raw RGB8 file with a `.idx` sidecar.
    #[arg(long)]
    emit_stream: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Tiling {
    Local,
    Overlap,
    Single,
}

#[derive(Debug, clap::Args)]
struct TileArgs {
    #[arg(long)]
    weights: PathBuf,
    /// PNG or raw tensor input.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tile extent in input pixels.
    #[arg(long, default_value_t = 64)]
    tile: usize,
    #[arg(long, value_enum, default_value = "local")]
    tiling: Tiling,
    /// Overlap in input pixels for the overlap baseline.
    #[arg(long, default_value_t = 0)]
    overlap: usize,
    /// Expected upscaling factor; checked against the network.
    #[arg(long)]
    scale: Option<usize>,
    /// Comma-separated: seams.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Compare against a single pass over the whole input.
    #[arg(long)]
    check: bool,
}

#[derive(Debug, clap::Args)]
struct DiversityArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Seed of the first sample; sample `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, value_enum, default_value = "local")]
    padding: Padding,
    #[arg(long, value_enum, default_value = "gaussian")]
    mode: Mode,
    /// Border band width in pixels.
    #[arg(long)]
    band: Option<usize>,
    /// Grayscale PNG of the map.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NetKind {
    Generator,
    ConvStack,
    Sr,
}

#[derive(Debug, clap::Args)]
struct RandomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "generator")]
    kind: NetKind,
    /// Generator residual blocks.
    #[arg(long, default_value_t = 5)]
    blocks: usize,
    /// Generator base channel width.
    #[arg(long, default_value_t = 32)]
    base: usize,
    #[arg(long, default_value_t = 4)]
    z_spatial: usize,
    #[arg(long, default_value_t = DEFAULT_Z_CHANNELS)]
    z_channels: usize,
    /// Convolutions in a conv stack.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Hidden width of conv stacks and SR nets.
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Kernel size of conv stacks.
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// SR upscaling factor.
    #[arg(long, default_value_t = 2)]
    factor: usize,
}

/// Writes via a temporary file in the same directory, so a failed command
/// never leaves a partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_owned();
    name.push(".partial");
    path.with_file_name(name)
}

fn encode_image(t: &Tensor, path: &Path) -> Result<Vec<u8>> {
    let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    Ok(if png { encode_png(t)? } else { encode_raw(t) })
}

fn load_network(path: &Path) -> Result<Network> {
    let (spec, store) = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Network::from_store(&spec, &store)?)
}

/// Pretty JSON on stdout. A closed pipe (`lpad ... | head`) is not an error.
fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, v)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn check_metrics(list: &[String], allowed: &[&str]) -> Result<()> {
    for m in list {
        ensure!(allowed.contains(&m.as_str()), "unknown metric {m:?}, expected one of {allowed:?}");
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    check_metrics(&a.metrics, &["seams", "stats"])?;
    let net = load_network(&a.weights)?;
    let cfg = SizedConfig { grid: a.grid, padding: a.padding.into(), mode: a.mode.into() };
    let mut writer = match &a.emit_stream {
        Some(p) => Some(StreamWriter::create(temp_path(p))?),
        None => None,
    };
    let result = generate_sized_with(&net, a.seed, a.size.w, a.size.h, cfg, |r| match writer.as_mut() {
        Some(w) => w.append(r),
        None => Ok(()),
    });
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            if let Some(p) = &a.emit_stream {
                let _ = fs::remove_file(temp_path(p));
                let _ = fs::remove_file(StreamWriter::index_path(&temp_path(p)));
            }
            return Err(e.into());
        }
    };
    let c = out.counters;
    eprintln!(
        "windows {} patches {} cache_floats {} peak_cache_floats {} latent_floats {}",
        c.windows, c.patches_evaluated, c.cache_floats, c.peak_cache_floats, c.latent_floats
    );

    let mut report = serde_json::Map::new();
    report.insert("size".into(), json!([a.size.w, a.size.h]));
    report.insert("seed".into(), json!(a.seed));
    report.insert("patch".into(), json!(out.patch));
    report.insert("counters".into(), serde_json::to_value(c)?);
    if a.metrics.iter().any(|m| m == "seams") {
        let seams = patch_seams(a.size.w, a.size.h, out.patch);
        let cfg = SeamConfig::phase_matched(net.spec().upscale());
        let value = match seam_metric(&out.image, &seams, cfg) {
            Ok(r) => serde_json::to_value(r)?,
            Err(e) => json!({ "error": e.to_string() }),
        };
        report.insert("seams".into(), value);
    }
    if a.metrics.iter().any(|m| m == "stats") {
        let s = patch_stats(&out.image, out.patch.min(a.size.w).min(a.size.h))?;
        report.insert("population_histogram".into(), json!(s.population()));
    }

    let bytes = encode_image(&out.image, &a.out)?;
    if let (Some(w), Some(p)) = (writer, &a.emit_stream) {
        w.finish()?;
        let tmp = temp_path(p);
        fs::rename(StreamWriter::index_path(&tmp), StreamWriter::index_path(p))?;
        fs::rename(&tmp, p)?;
    }
    write_atomic(&a.out, &bytes)?;
    print_json(&Value::Object(report))
}

fn tile_boundaries(len: usize, tile: usize, min: usize, scale: usize) -> Result<Vec<usize>> {
    let parts = split_extent(len, tile, min)?;
    Ok(parts.iter().scan(0, |acc, p| {
        *acc += p;
        Some(*acc * scale)
    }).take(parts.len() - 1).collect())
}

fn cmd_tile_apply(a: TileArgs) -> Result<()> {
    check_metrics(&a.metrics, &["seams"])?;
    let net = load_network(&a.weights)?;
    let spec = net.spec();
    let scale = spec.upscale();
    if let Some(k) = a.scale {
        ensure!(k == scale, "--scale {k} but the network upscales by {scale}");
    }
    let input = read_image(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mode = match a.tiling {
        Tiling::Local => TileMode::LocalPadding,
        Tiling::Overlap => TileMode::OverlapBaseline { overlap: a.overlap },
        Tiling::Single => TileMode::SinglePass,
    };
    let out = tile_apply(&input, &net, TilePlan { tile: a.tile, mode })?;

    let mut report = serde_json::Map::new();
    report.insert("tiling".into(), serde_json::to_value(mode)?);
    report.insert("tile".into(), json!(a.tile));
    report.insert("scale".into(), json!(scale));
    if a.check {
        let single = tile_apply(&input, &net, TilePlan { tile: a.tile, mode: TileMode::SinglePass })?;
        report.insert("check_max_abs_diff".into(), json!(max_abs_diff(&out, &single)?));
    }
    if a.metrics.iter().any(|m| m == "seams") {
        let s = input.shape();
        let min = min_tile(spec).min(a.tile);
        let mut seams: Vec<Seam> =
            tile_boundaries(s.w, a.tile, min, scale)?.into_iter().map(Seam::vertical).collect();
        seams.extend(tile_boundaries(s.h, a.tile, min, scale)?.into_iter().map(Seam::horizontal));
        let value = match seam_metric(&out, &seams, SeamConfig::default()) {
            Ok(r) => serde_json::to_value(r)?,
            Err(e) => json!({ "error": e.to_string() }),
        };
        report.insert("seams".into(), value);
    }
    write_atomic(&a.out, &encode_image(&out, &a.out)?)?;
    print_json(&Value::Object(report))
}

fn cmd_diversity(a: DiversityArgs) -> Result<()> {
    ensure!(a.samples >= 2, "--samples must be at least 2");
    ensure!(a.grid >= 1, "--grid must be positive");
    let net = load_network(&a.weights)?;
    let spec = net.spec();
    let (padding, mode) = (a.padding.into(), a.mode.into());
    let map = diversity_map(
        |i| {
            let g = sample_latent_grid(a.grid, a.grid, spec, a.seed.wrapping_add(i as u64), mode)?;
            Ok(generate_block(&g, &net, padding)?.image)
        },
        a.samples,
    )?;
    let stats = map.band_stats(a.band)?;
    let pixels = map.pixel_map();
    let s = map.std.shape();
    let max = pixels.iter().copied().fold(0f32, f32::max);
    if let Some(out) = &a.out {
        write_atomic(out, &encode_gray_png(&pixels, s.w, s.h, max)?)?;
    }
    print_json(&json!({
        "samples": a.samples,
        "seed": a.seed,
        "size": [s.w, s.h],
        "band": stats,
        "zero_pixels": pixels.iter().filter(|&&v| v == 0.0).count(),
    }))
}

fn cmd_random(a: RandomArgs) -> Result<()> {
    let spec: NetworkSpec = match a.kind {
        NetKind::Generator => build_texture_generator(a.blocks, a.base, a.z_spatial, a.z_channels)?,
        NetKind::ConvStack => conv_stack(a.depth, 3, a.width, 3, a.kernel, ConvPadding::Zero),
        NetKind::Sr => sr_stack(3, a.width, a.factor),
    };
    let net = Network::random(&spec, a.seed)?;
    write_atomic(&a.out, &to_bytes(&spec, &net.to_store()?)?)?;
    eprintln!("wrote {} ({} parameters)", a.out.display(), net.to_store()?.total_floats());
    Ok(())
}

fn cmd_info(weights: &Path) -> Result<()> {
    let (spec, store) = load_weights(weights)?;
    print_json(&json!({
        "network": spec,
        "parameters": store.total_floats(),
        "patch_extent": spec.patch_extent(),
        "upscale": spec.upscale(),
        "receptive_radius": spec.receptive_radius(),
    }))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LPAD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LPAD_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("LPAD_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::TileApply(a) => cmd_tile_apply(a),
        Command::Diversity(a) => cmd_diversity(a),
        Command::RandomWeights(a) => cmd_random(a),
        Command::Info { weights } => cmd_info(&weights),
    }
}
