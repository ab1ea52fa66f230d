//! `mrisynth` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrisynth_core::io::{read_atlas, read_labels, read_volume, write_atlas, write_labels, write_record, write_volume};
use mrisynth_core::{build_atlas, dice_report, em_segment, load_config, EmOptions, Error, GenConfig, Generator, LabelMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mrisynth", version, about = "Synthetic brain MRI training pairs and EM segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write N image/target NIfTI pairs plus their parameter records.
    Generate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit binary pair records to stdout or to one TCP consumer at a time.
    Stream {
        #[command(flatten)]
        source: Source,
        /// Number of records; unbounded when omitted.
        #[arg(long)]
        count: Option<u64>,
        #[arg(long, conflicts_with = "stdout", required_unless_present = "stdout")]
        listen: Option<String>,
        #[arg(long)]
        stdout: bool,
    },
    /// Build a probabilistic atlas (4D NIfTI) from label maps.
    MakeAtlas {
        #[arg(long, num_args = 1.., required = true)]
        maps: Vec<PathBuf>,
        /// Smoothing in voxels.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment an image with EM under an atlas prior.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        bias: Switch,
        #[arg(long, default_value_t = 3)]
        bias_order: u32,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-label posteriors as `<stem>_post_<label>.nii.gz` next to `--out`.
        #[arg(long)]
        posteriors: bool,
    },
    /// Per-label Dice between two label maps, as CSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated label ids; defaults to every non-zero label in either map.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<u16>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Source {
    /// Label-map files, or directories scanned for `.nii`/`.nii.gz`.
    #[arg(long, num_args = 1.., required = true)]
    maps: Vec<PathBuf>,
    /// JSON config; omitted keys take the default hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn execute(cmd: Command) -> mrisynth_core::Result<()> {
    match cmd {
        Command::Generate { source, count, out } => {
            let gen = source.generator()?;
            with_threads(source.threads, || generate(gen, count, &out))
        }
        Command::Stream { source, count, listen, stdout } => {
            let gen = source.generator()?;
            with_threads(source.threads, || match listen {
                Some(addr) => serve(gen, count, &addr),
                None => {
                    debug_assert!(stdout);
                    let out = io::stdout().lock();
                    emit(gen, 0, count, &mut BufWriter::new(out)).map(|_| ())
                }
            })
        }
        Command::MakeAtlas { maps, sigma, out } => {
            let maps = load_maps(&maps)?;
            write_atlas(&out, &build_atlas(&maps, sigma)?)
        }
        Command::Segment { image, atlas, bias, bias_order, max_iter, tol, out, posteriors } => {
            let img = read_volume(&image)?.into_volume();
            let atlas = read_atlas(&atlas)?;
            let opts = EmOptions { max_iter, tol, bias: bias == Switch::On, bias_order };
            let r = em_segment(&img, &atlas, &opts)?;
            write_labels(&out, &r.labels)?;
            if posteriors {
                for (l, p) in r.ordering.iter().zip(&r.posteriors) {
                    write_volume(sibling(&out, &format!("post_{l}")), p)?;
                }
            }
            Ok(())
        }
        Command::Evaluate { pred, truth, labels, out } => {
            let a = read_labels(&pred)?;
            let b = read_labels(&truth)?;
            let labels = labels.unwrap_or_else(|| {
                let mut s: BTreeSet<u16> = a.label_set();
                s.extend(b.label_set());
                s.remove(&0);
                s.into_iter().collect()
            });
            let report = dice_report(&a, &b, &labels, &[])?;
            fs::write(&out, report.to_csv()).map_err(|e| Error::Io { path: out.clone(), source: e })
        }
    }
}

impl Source {
    fn generator(&self) -> mrisynth_core::Result<Arc<Generator>> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => GenConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(Arc::new(Generator::new(load_maps(&self.maps)?, cfg)?))
    }
}

fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> mrisynth_core::Result<T> + Send,
) -> mrisynth_core::Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParam { name: "threads".into(), reason: e.to_string() })?
            .install(f),
    }
}

/// `out` with `_suffix` appended to its stem, keeping `.nii.gz`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let (stem, ext) = match name.find('.') {
        Some(i) => name.split_at(i),
        None => (name.as_str(), ".nii.gz"),
    };
    out.with_file_name(format!("{stem}_{suffix}{ext}"))
}

fn is_nifti(p: &Path) -> bool {
    let n = p.to_string_lossy();
    n.ends_with(".nii") || n.ends_with(".nii.gz")
}

fn load_maps(paths: &[PathBuf]) -> mrisynth_core::Result<Vec<LabelMap>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_nifti(f))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Empty("label map list"));
    }
    files.iter().map(read_labels).collect()
}

fn generate(gen: Arc<Generator>, count: u64, out: &Path) -> mrisynth_core::Result<()> {
    if count == 0 {
        return Ok(());
    }
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    for pair in gen.stream(Some(count)) {
        let pair = pair?;
        let i = pair.record.sample_index;
        write_volume(out.join(format!("{i:06}_image.nii.gz")), &pair.image)?;
        write_labels(out.join(format!("{i:06}_target.nii.gz")), &pair.target)?;
        let json = out.join(format!("{i:06}_params.json"));
        fs::write(&json, pair.record.to_json()).map_err(|e| Error::Io { path: json, source: e })?;
    }
    Ok(())
}

/// Writes records `start..` to `w`; returns the next unsent index. A broken
/// pipe ends the stream without error.
fn emit<W: Write>(gen: Arc<Generator>, start: u64, count: Option<u64>, w: &mut W) -> mrisynth_core::Result<u64> {
    let mut next = start;
    for pair in gen.stream(count).starting_at(start) {
        let pair = pair?;
        match write_record(w, &pair).and_then(|_| w.flush().map_err(Error::from)) {
            Ok(()) => next += 1,
            Err(Error::Stream(e)) if is_disconnect(&e) => return Ok(next),
            Err(e) => return Err(e),
        }
    }
    Ok(next)
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted
    )
}

/// Serves consumers one at a time; a new consumer continues where the last one stopped.
fn serve(gen: Arc<Generator>, count: Option<u64>, addr: &str) -> mrisynth_core::Result<()> {
    let listener = TcpListener::bind(addr)?;
    eprintln!("mrisynth: listening on {}", listener.local_addr()?);
    let mut next = 0u64;
    for conn in listener.incoming() {
        let conn = conn?;
        next = emit(gen.clone(), next, count, &mut BufWriter::new(conn))?;
        if count.is_some_and(|c| next >= c) {
            break;
        }
    }
    Ok(())
}
