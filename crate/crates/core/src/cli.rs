//! The `musco` command line. Every command writes its human-readable output
//! to the given writer so it can be driven from tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::decomp::Ranks;
use crate::driver::musco_run;
use crate::error::{Error, Result};
use crate::io::{self, RunConfig};
use crate::modelgraph::{count_flops, count_params, zoo, ActShape, GroupFactors, ModelGraph};
use crate::rank_select::evbmf_rank;
use crate::trainer::{self, evaluate, fine_tune, SyntheticSpec, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "musco", version, about = "Iterative low-rank compression of convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    ToyCnn,
    Vgg16,
    ResnetStem,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and MAC table of a model.
    Analyze {
        model: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the compression loop described by a TOML config.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory for model.json, model.bin and report.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// EVBMF rank estimate of a text matrix.
    Evbmf {
        matrix: PathBuf,
        #[arg(long)]
        transpose: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic class-template dataset as IDX files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// File prefix: `<prefix>-images.idx`, `<prefix>-labels.idx`.
        #[arg(long, default_value = "train")]
        prefix: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[arg(long, default_value_t = 0.25)]
        contrast: f64,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample stream; files with the same seed and different draws share
        /// class templates.
        #[arg(long, default_value_t = 0)]
        draw: u64,
    },
    /// Accuracy and mean loss of a model on an IDX dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train a model with momentum SGD.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eval_images: Option<PathBuf>,
        #[arg(long)]
        eval_labels: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a fresh model.
    InitModel {
        #[arg(long, value_enum)]
        arch: Arch,
        /// Square input size (toy-cnn is fixed at 28).
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// All-zero weights.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `A·B + noise·N` with a planted rank as a text matrix.
    PlantMatrix {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub input: ActShape,
    pub output: ActShape,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub name: String,
    pub ranks: Ranks,
    pub members: Vec<String>,
    pub params: usize,
    pub macs: u64,
    /// Cost of the dense layer the group replaced.
    pub dense_params: usize,
    pub dense_macs: u64,
    pub param_ratio: f64,
    pub mac_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerRow>,
    pub groups: Vec<GroupRow>,
    pub total_params: usize,
    pub total_macs: u64,
}

pub fn analyze(g: &ModelGraph) -> Result<Analysis> {
    let params = count_params(g);
    let flops = count_flops(g, g.input_shape())?;
    let layers: Vec<LayerRow> = g
        .layers()
        .iter()
        .zip(&params.per_layer)
        .zip(&flops.per_layer)
        .map(|((l, p), f)| LayerRow {
            name: l.name.clone(),
            kind: l.kind.name().to_string(),
            input: f.input,
            output: f.output,
            params: p.weights + p.bias,
            macs: f.macs,
        })
        .collect();
    let mut groups = Vec::new();
    for group in g.groups() {
        let rows: Vec<&LayerRow> = layers.iter().filter(|r| group.members.contains(&r.name)).collect();
        let p: usize = rows.iter().map(|r| r.params).sum();
        let m: u64 = rows.iter().map(|r| r.macs).sum();
        let w = params.layer_weights(&group.name, g);
        let bias = p - w;
        let (dense_w, positions) = match g.group_factors(&group.name)? {
            GroupFactors::Tucker2(f) => (f.d() * f.d() * f.c_in() * f.c_out(), spatial_positions(rows[1].output)),
            GroupFactors::Cpd3(f) => (f.d() * f.d() * f.c_in() * f.c_out(), spatial_positions(rows[1].output)),
            GroupFactors::Svd(f) => (f.l_in() * f.l_out(), 1),
        };
        let dense_params = dense_w + bias;
        let dense_macs = (dense_w * positions) as u64;
        groups.push(GroupRow {
            name: group.name.clone(),
            ranks: group.ranks,
            members: group.members.clone(),
            params: p,
            macs: m,
            dense_params,
            dense_macs,
            param_ratio: dense_params as f64 / p.max(1) as f64,
            mac_ratio: dense_macs as f64 / m.max(1) as f64,
        });
    }
    Ok(Analysis {
        input_shape: g.input_shape(),
        total_params: params.total(),
        total_macs: flops.total,
        layers,
        groups,
    })
}

fn spatial_positions(s: ActShape) -> usize {
    match s {
        ActShape::Spatial { h, w, .. } => h * w,
        ActShape::Flat { .. } => 1,
    }
}

fn mflops(macs: u64) -> f64 {
    macs as f64 / 1e6
}

/// Whole MFLOPs, or two decimals below 10.
fn mflops_cell(macs: u64) -> String {
    let m = mflops(macs);
    if m >= 10.0 {
        format!("{m:.0}")
    } else {
        format!("{m:.2}")
    }
}

pub fn print_analysis(a: &Analysis, out: &mut dyn Write) -> std::io::Result<()> {
    let [h, w, c] = a.input_shape;
    writeln!(out, "input {h}x{w}x{c}")?;
    writeln!(
        out,
        "{:<16} {:<16} {:>14} {:>14} {:>12} {:>10}",
        "layer", "kind", "input", "output", "params", "MFLOPs"
    )?;
    for r in &a.layers {
        writeln!(
            out,
            "{:<16} {:<16} {:>14} {:>14} {:>12} {:>10}",
            r.name,
            r.kind,
            r.input.to_string(),
            r.output.to_string(),
            r.params,
            mflops_cell(r.macs)
        )?;
    }
    writeln!(out, "total params {}  total MFLOPs {:.1}", a.total_params, mflops(a.total_macs))?;
    for gr in &a.groups {
        writeln!(
            out,
            "group {} {} [{}]: params {} (dense {}, {:.2}x), MFLOPs {:.2} (dense {:.2}, {:.2}x)",
            gr.name,
            gr.ranks,
            gr.members.join(", "),
            gr.params,
            gr.dense_params,
            gr.param_ratio,
            mflops(gr.macs),
            mflops(gr.dense_macs),
            gr.mac_ratio
        )?;
    }
    Ok(())
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Analyze { model, json } => {
            let g = io::load_model(&model)?;
            let a = analyze(&g)?;
            print_analysis(&a, out).map_err(out_err)?;
            if let Some(path) = json {
                write_json(&path, &a)?;
            }
        }
        Command::Compress {
            model,
            config,
            out: dir,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.apply_seed(seed);
            }
            let g = io::load_model(&model)?;
            let d = &cfg.data;
            let train = io::load_idx(&d.train_images, &d.train_labels, Some(d.classes))?;
            let eval = match (&d.eval_images, &d.eval_labels) {
                (Some(i), Some(l)) => io::load_idx(i, l, Some(d.classes))?,
                _ => train.clone(),
            };
            let (compressed, report) = musco_run(&g, &train, &eval, &cfg.musco)?;
            create_dir(&dir)?;
            io::save_model(&compressed, &dir.join("model.json"))?;
            write_json(&dir.join("report.json"), &report)?;
            writeln!(
                out,
                "{}: {} iterations, stop {}, params {} -> {} ({:.2}x), MFLOPs {:.1} -> {:.1} ({:.2}x)",
                report.run_name,
                report.iterations.len(),
                report.stop_reason.map_or("none".to_string(), |r| r.to_string()),
                report.original_params,
                report.final_params,
                report.param_ratio,
                mflops(report.original_macs),
                mflops(report.final_macs),
                report.flop_ratio
            )
            .map_err(out_err)?;
            if let (Some(a), Some(b)) = (report.baseline_accuracy, report.final_accuracy) {
                writeln!(out, "accuracy {a:.4} -> {b:.4}").map_err(out_err)?;
            }
        }
        Command::Evbmf { matrix, transpose, json } => {
            let mut m = io::read_matrix(&matrix)?;
            if transpose {
                m = m.transpose();
            }
            let est = evbmf_rank(&m)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&est)?).map_err(out_err)?;
            } else {
                writeln!(
                    out,
                    "rank {}\nnoise_variance {:e}\nthreshold {:e}",
                    est.rank, est.noise_variance, est.threshold
                )
                .map_err(out_err)?;
            }
        }
        Command::GenData {
            out: dir,
            prefix,
            classes,
            samples,
            size,
            contrast,
            noise,
            seed,
            draw,
        } => {
            let spec = SyntheticSpec {
                classes,
                samples,
                height: size,
                width: size,
                contrast,
                noise,
                draw,
            };
            let (images, labels) = trainer::gen_synthetic_bytes(&spec, seed)?;
            create_dir(&dir)?;
            let pi = dir.join(format!("{prefix}-images.idx"));
            let pl = dir.join(format!("{prefix}-labels.idx"));
            io::write_idx_images(&pi, &images, samples, size, size)?;
            io::write_idx_labels(&pl, &labels)?;
            writeln!(out, "wrote {} and {}", pi.display(), pl.display()).map_err(out_err)?;
        }
        Command::Eval {
            model,
            images,
            labels,
            classes,
        } => {
            let g = io::load_model(&model)?;
            let data = io::load_idx(&images, &labels, classes)?;
            let (acc, loss) = evaluate(&g, &data)?;
            writeln!(out, "accuracy {acc:.4} loss {loss:.4} samples {}", data.len()).map_err(out_err)?;
        }
        Command::Train {
            model,
            images,
            labels,
            out: dest,
            eval_images,
            eval_labels,
            epochs,
            lr,
            momentum,
            batch_size,
            seed,
        } => {
            let g = io::load_model(&model)?;
            let classes = match g.output_shape()? {
                ActShape::Flat { n } => Some(n),
                ActShape::Spatial { .. } => None,
            };
            let train = io::load_idx(&images, &labels, classes)?;
            let eval = match (eval_images, eval_labels) {
                (Some(i), Some(l)) => io::load_idx(&i, &l, classes)?,
                (None, None) => train.clone(),
                _ => return Err(Error::Config("--eval-images and --eval-labels go together".into())),
            };
            let cfg = TrainConfig {
                learning_rate: lr,
                momentum,
                epochs,
                batch_size,
                seed,
                ..TrainConfig::default()
            };
            let (tuned, history) = fine_tune(&g, &train, &eval, &cfg)?;
            io::save_model(&tuned, &dest)?;
            for (i, (l, a)) in history.train_loss.iter().zip(&history.eval_accuracy).enumerate() {
                writeln!(out, "epoch {} train_loss {l:.4} eval_accuracy {a:.4}", i + 1).map_err(out_err)?;
            }
        }
        Command::InitModel {
            arch,
            size,
            seed,
            zero,
            out: dest,
        } => {
            let seed_opt = (!zero).then_some(seed);
            let g = match arch {
                Arch::ToyCnn => {
                    let mut g = zoo::toy_cnn(seed)?;
                    if zero {
                        for l in g.layers_mut() {
                            if let Some((w, b)) = l.kind.params_mut() {
                                w.fill(0.0);
                                if let Some(b) = b {
                                    b.fill(0.0);
                                }
                            }
                        }
                    }
                    g
                }
                Arch::Vgg16 => zoo::vgg16_convs(size, seed_opt)?,
                Arch::ResnetStem => zoo::resnet_stem(size, seed_opt)?,
            };
            io::save_model(&g, &dest)?;
            writeln!(out, "wrote {} ({} params)", dest.display(), g.num_params()).map_err(out_err)?;
        }
        Command::PlantMatrix {
            rows,
            cols,
            rank,
            noise,
            seed,
            out: dest,
        } => {
            let m = io::plant_low_rank(rows, cols, rank, noise, seed)?;
            io::write_matrix(&dest, &m)?;
            writeln!(out, "wrote {} ({rows}x{cols}, rank {rank})", dest.display()).map_err(out_err)?;
        }
    }
    Ok(())
}
