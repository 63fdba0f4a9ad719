use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use patchcast::attention::{self, profile_to_pgm, AttentionMethod};
use patchcast::dataset::{decode_image, Dataset};
use patchcast::fixture::toy_fixture;
use patchcast::gate::{EntropyMeasure, GateSpec};
use patchcast::pipeline::{
    check_compatible, flops_deit, run_pipeline, server_compute_ratio, sweep, write_sweep_csv, PipelineConfig,
    PipelineOutput, RemoteOffloader, Server, SweepConfig,
};
use patchcast::protocol::TcpTransport;
use patchcast::selection::SelectionRule;
use patchcast::vit::{classify, ModelWeights};

#[derive(Parser)]
#[command(name = "patchcast", version, about = "Attention-aware patch offloading between an edge ViT and a server ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve patch frames over TCP.
    Serve {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Run the edge side against a TCP server.
    Client {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        server: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run both sides in one process over an in-process channel.
    RunLocal {
        #[arg(long)]
        client_weights: PathBuf,
        #[arg(long)]
        server_weights: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep attention-sum and entropy thresholds; one CSV row per pair.
    Sweep {
        #[arg(long)]
        client_weights: PathBuf,
        #[arg(long)]
        server_weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        delta_sum: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        eta: Vec<f64>,
        #[arg(long, default_value = "min")]
        measure: EntropyMeasure,
        #[arg(long, default_value = "mean")]
        attention: AttentionMethod,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Server operation count 144·N·D² + 24·N²·D.
    Flops {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        d: u64,
        /// Also report the fraction of compute for this many selected patches.
        #[arg(long)]
        selected: Option<u64>,
    },
    /// Write the client attention map of one image as a PGM.
    InspectAttention {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mean")]
        method: AttentionMethod,
    },
    /// Regenerate the toy fixture (client.swit, server.swit, dataset/).
    GenFixture {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// topk:K | threshold:D | sum:D | random:M[:SEED]
    #[arg(long, default_value = "sum:0.97")]
    rule: SelectionRule,
    /// min:ETA | shannon:ETA
    #[arg(long, default_value = "min:0.8")]
    entropy: GateSpec,
    #[arg(long, default_value = "mean")]
    attention: AttentionMethod,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fail_fast: bool,
}

impl RunArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig { rule: self.rule, gate: self.entropy, attention: self.attention, fail_fast: self.fail_fast }
    }
}

fn load(path: &Path) -> Result<ModelWeights> {
    ModelWeights::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn report(out: &PipelineOutput, dest: Option<&Path>) -> Result<()> {
    out.write_records_csv(output(dest)?)?;
    let s = out.ledger.summary();
    let failures = out.records.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "images {}  offloaded {} ({:.4})  cost_ratio {:.4}  accuracy {:.4}  failures {}",
        s.images,
        s.offloaded,
        s.offload_rate,
        s.cost_ratio,
        out.accuracy(),
        failures
    );
    eprintln!("bits: payload {}  position {}  result {}", s.patch_payload_bits, s.position_bits, s.result_bits);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Serve { weights, listen } => {
            let server = Server::new(load(&weights)?);
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            server.serve_tcp(listener)?;
        }
        Command::Client { weights, server, run } => {
            let client = load(&weights)?;
            let dataset = Dataset::load(&run.dataset)?;
            let transport = TcpTransport::connect(&server).with_context(|| format!("connecting to {server}"))?;
            let mut offloader = RemoteOffloader::new(transport);
            let out = run_pipeline(&run.config(), &client, &dataset, &mut offloader)?;
            offloader.into_inner().shutdown_write().ok();
            report(&out, run.out.as_deref())?;
        }
        Command::RunLocal { client_weights, server_weights, run } => {
            let client = load(&client_weights)?;
            let server_w = load(&server_weights)?;
            check_compatible(&client, &server_w)?;
            let dataset = Dataset::load(&run.dataset)?;
            let (transport, handle) = Server::new(server_w).spawn_in_process();
            let mut offloader = RemoteOffloader::new(transport);
            let out = run_pipeline(&run.config(), &client, &dataset, &mut offloader)?;
            drop(offloader);
            if let Err(e) = handle.join().expect("server thread panicked") {
                bail!("in-process server failed: {e}");
            }
            report(&out, run.out.as_deref())?;
        }
        Command::Sweep { client_weights, server_weights, dataset, delta_sum, eta, measure, attention, out } => {
            let client = load(&client_weights)?;
            let server_w = load(&server_weights)?;
            check_compatible(&client, &server_w)?;
            let dataset = Dataset::load(&dataset)?;
            let cfg = SweepConfig { delta_sums: delta_sum, etas: eta, measure, attention };
            let rows = sweep(&cfg, &client, &Server::new(server_w), &dataset)?;
            write_sweep_csv(&rows, output(out.as_deref())?)?;
        }
        Command::Flops { n, d, selected } => {
            println!("{}", flops_deit(n, d)?);
            if let Some(k) = selected {
                println!("{} ({:.6} of full)", flops_deit(k, d)?, server_compute_ratio(k, n, d)?);
            }
        }
        Command::InspectAttention { image, weights, out, method } => {
            let w = load(&weights)?;
            let bytes = fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let (img, _) = decode_image(&bytes).map_err(anyhow::Error::msg)?;
            let (label, trace) = classify(&img, &w)?;
            let profile = attention::profile(&trace, method)?;
            let p = w.dims.patch_size;
            fs::write(&out, profile_to_pgm(&profile, img.height() / p, img.width() / p, p))?;
            eprintln!("label {label}  confidence {:.4}", trace.confidence());
        }
        Command::GenFixture { out } => {
            let fx = toy_fixture();
            fs::create_dir_all(&out)?;
            fx.client.save(out.join("client.swit"))?;
            fx.server.save(out.join("server.swit"))?;
            fx.dataset.save(out.join("dataset"))?;
            eprintln!("wrote {} images and two weight files to {}", fx.dataset.len(), out.display());
        }
    }
    Ok(())
}
