//! The `msnet` command line: data generation, training, evaluation,
//! prediction export, gradient checking and schedule inspection.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arch::{build, init_params, ArchConfig, SkipInit, Variant};
use crate::data::{export_label_map, gen_context_shapes, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::graph::{grad_check, topo_schedule, Feed, GradCheckConfig, Graph, ParamStore, Role};
use crate::train::{evaluate, predict, train, TrainConfig};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::InvalidSpec(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::BadMagic { .. } | Error::TruncatedFile { .. } | Error::VersionUnsupported(_) => {
            EXIT_IO
        }
        Error::ShapeMismatch(_) | Error::NodeShape { .. } => EXIT_SHAPE,
        _ => EXIT_OTHER,
    }
}

/// Everything one training run needs, as a single strict JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub train_data: PathBuf,
    /// Evaluated after training when present.
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every field resolved.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

pub const MSWT_MAGIC: [u8; 4] = *b"MSWT";
pub const MSWT_VERSION: u16 = 1;

/// Weights file: magic, version, the architecture JSON, then every slot in
/// slot order (name, extents, f64 weights, f64 bias). Little-endian,
/// lengths as `u32` except names (`u16`). Momentum is not stored.
pub fn encode_weights(arch: &ArchConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MSWT_MAGIC);
    out.extend_from_slice(&MSWT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(arch).expect("arch serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, spec, p) in params.iter() {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        for v in [p.out_channels, p.in_channels, p.kernel_h, p.kernel_w, p.stride, p.padding] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in p.weights.iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedFile {
            expected: (self.pos + n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a weights file into its architecture, graph and parameters.
pub fn decode_weights(bytes: &[u8]) -> Result<(ArchConfig, Graph, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MSWT_MAGIC {
        return Err(Error::BadMagic {
            expected: MSWT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != MSWT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let json_len = r.u32()? as usize;
    let arch: ArchConfig =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Config(format!("embedded config: {e}")))?;
    let graph = build(&arch)?;
    let mut params = ParamStore::zeros(graph.slots());
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "weights hold {count} slots, {} has {}",
            arch.variant,
            params.len()
        )));
    }
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let slot = crate::graph::SlotId(i);
        if params.spec(slot).name != name {
            return Err(Error::ShapeMismatch(format!(
                "slot {i} is {name}, expected {}",
                params.spec(slot).name
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [out_c, in_c, kh, kw, stride, padding] = dims;
        let mut p = crate::tensor::ConvParams::zeros(out_c, in_c, kh, kw, stride, padding);
        p.weights = r.f64s(out_c * in_c * kh * kw)?;
        p.bias = r.f64s(out_c)?;
        params.set(slot, p)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::TruncatedFile {
            expected: r.pos as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok((arch, graph, params))
}

pub fn save_weights(arch: &ArchConfig, params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(arch, params)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(ArchConfig, Graph, ParamStore)> {
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Parser)]
#[command(name = "msnet", version, about = "Master-Slave fully convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a context-shapes dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a run config; writes history, weights and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print PA/CA/IU of trained weights on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        /// Defaults to the config's test data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write one PGM label map per sample.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of a toy network.
    Gradcheck {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the execution plan as `role:block:node` lines.
    InspectSchedule {
        #[arg(long)]
        variant: String,
        /// Print only the order of block outputs (`S1`, `M1`, ...).
        #[arg(long)]
        blocks: bool,
    },
}

/// Runs the CLI with explicit arguments, writing normal output to `out`.
/// Returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData {
            out: path,
            resolution,
            count,
            seed,
        } => {
            let ds = gen_context_shapes(resolution, count, seed)?;
            save_dataset(&ds, &path)?;
            let bytes = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            write_out(out, &format!("{count} samples, {bytes} bytes\n"))?;
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let ds = load_dataset(&cfg.train_data)?;
            let mut outcome = train(&cfg.arch, &cfg.train, &ds)?;
            if let Some(test) = &cfg.test_data {
                let test = load_dataset(test)?;
                outcome.history.metrics = Some(evaluate(&outcome.graph, &outcome.params, &test)?);
            }
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            write_file(&cfg.out_dir.join("history.csv"), outcome.history.to_csv().as_bytes())?;
            save_weights(&cfg.arch, &outcome.params, &cfg.out_dir.join("weights.mswt"))?;
            write_file(&cfg.out_dir.join("config.json"), cfg.to_json().as_bytes())?;
            if let Some(m) = &outcome.history.metrics {
                write_out(out, &format!("{}\n", m.line()))?;
            }
        }
        Command::Eval { config, weights, data } => {
            let (arch, graph, params) = load_weights(&weights)?;
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            if let Some(cfg) = &cfg {
                if cfg.arch != arch {
                    return Err(Error::Config("weights were trained with a different architecture".into()));
                }
            }
            let data = data
                .or_else(|| cfg.and_then(|c| c.test_data))
                .ok_or_else(|| Error::Config("no --data and no test_data in the config".into()))?;
            let ds = load_dataset(&data)?;
            let report = evaluate(&graph, &params, &ds)?;
            write_out(out, &format!("{}\n", report.line()))?;
        }
        Command::Predict { weights, data, out_dir } => {
            let (arch, graph, params) = load_weights(&weights)?;
            let ds = load_dataset(&data)?;
            check_dataset(&arch, &ds)?;
            let plan = topo_schedule(&graph)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for (i, s) in ds.samples.iter().enumerate() {
                let labels = predict(&graph, &plan, &params, &s.image)?;
                export_label_map(&labels, arch.num_classes, out_dir.join(format!("sample_{i:04}.pgm")))?;
            }
            write_out(out, &format!("{} label maps\n", ds.len()))?;
        }
        Command::Gradcheck {
            variant,
            seed,
            eps,
            tolerance,
        } => {
            let variant: Variant = variant.parse()?;
            let arch = ArchConfig::new(variant);
            let graph = build(&arch)?;
            let params = init_params(&graph, seed, SkipInit::He);
            let ds = gen_context_shapes(arch.input_h, 1, seed)?;
            let s = &ds.samples[0];
            let cfg = GradCheckConfig {
                eps,
                tolerance,
                seed,
                loss_weights: arch.loss_weights,
                ..Default::default()
            };
            let feed = Feed {
                image: &s.image,
                labels: Some(&s.labels),
            };
            let report = grad_check(&graph, &params, &feed, &cfg)?;
            write_out(
                out,
                &format!(
                    "max_rel_error={:.3e} worst_slot={}[{}] checked={} skipped_kinks={}\n",
                    report.max_rel_error, report.worst_slot, report.worst_index, report.checked, report.skipped_kinks
                ),
            )?;
            if !report.passed() {
                eprintln!("gradient check failed: tolerance {tolerance:e}");
                return Ok(EXIT_GRADCHECK);
            }
        }
        Command::InspectSchedule { variant, blocks } => {
            let variant: Variant = variant.parse()?;
            let graph = build(&ArchConfig::new(variant))?;
            let plan = topo_schedule(&graph)?;
            if blocks {
                let mut text = String::new();
                for (role, block) in plan.block_sequence(&graph) {
                    let letter = if role == Role::Slave { 'S' } else { 'M' };
                    text.push_str(&format!("{letter}{block}\n"));
                }
                write_out(out, &text)?;
            } else {
                write_out(out, &plan.render(&graph))?;
            }
        }
    }
    Ok(0)
}

fn check_dataset(arch: &ArchConfig, ds: &Dataset) -> Result<()> {
    match ds.extents() {
        Some(ext) if ext != (arch.in_channels, arch.input_h, arch.input_w) => Err(Error::ShapeMismatch(format!(
            "dataset samples are {ext:?}, weights expect {}x{}x{}",
            arch.in_channels, arch.input_h, arch.input_w
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let arch = ArchConfig::new(Variant::MSNetB1);
        let graph = build(&arch).unwrap();
        let params = init_params(&graph, 3, SkipInit::He);
        let bytes = encode_weights(&arch, &params);
        let (a, _, p) = decode_weights(&bytes).unwrap();
        assert_eq!(a, arch);
        for ((_, _, x), (_, _, y)) in p.iter().zip(params.iter()) {
            assert_eq!(x, y);
        }
        assert!(matches!(decode_weights(&bytes[..bytes.len() - 1]), Err(Error::TruncatedFile { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_weights(&bad), Err(Error::VersionUnsupported(9))));
    }

    #[test]
    fn run_config_is_strict() {
        let ok = r#"{"arch":{"variant":"FCN8s"},"train_data":"a.msds","out_dir":"o"}"#;
        let cfg = RunConfig::from_json(ok).unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let bad = r#"{"arch":{"variant":"FCN8s"},"train_data":"a","out_dir":"o","lr":1}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::VersionUnsupported(2)), EXIT_IO);
        let wrapped = Error::Batch {
            batch: 3,
            source: Box::new(Error::ShapeMismatch("x".into())),
        };
        assert_eq!(exit_code(&wrapped), EXIT_SHAPE);
    }
}
