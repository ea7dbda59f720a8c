use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ahce::grpo::{self, TrainerConfig};
use ahce::harness::{self, FrameworkConfig, RunMeta, Variant};
use ahce::pim::NMax;

#[derive(Parser)]
#[command(name = "ahce", version, about = "Human-in-the-loop crafting agent: episodes, suites, sweeps, training, expert gateway")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpertKind {
    Scripted,
    Live,
}

#[derive(clap::Args, Clone)]
struct Knobs {
    /// Simulated seconds charged per scripted reply.
    #[arg(long, default_value_t = 15.0)]
    review_cost: f64,
    /// Probability that a raw-log reply omits the key fix (log variant only).
    #[arg(long, default_value_t = 0.2)]
    reply_noise: f64,
    #[arg(long, default_value_t = 200)]
    s_max: u32,
}

impl Knobs {
    fn apply(&self, mut cfg: FrameworkConfig) -> Result<FrameworkConfig> {
        if !(0.0..=1.0).contains(&self.reply_noise) {
            bail!("--reply-noise must be in [0, 1]");
        }
        if !self.review_cost.is_finite() || self.review_cost < 0.0 {
            bail!("--review-cost must be a non-negative number of seconds");
        }
        cfg.review_cost = Duration::from_secs_f64(self.review_cost);
        cfg.reply_noise = self.reply_noise;
        cfg.s_max = self.s_max;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one episode and write its record as JSON.
    Run {
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "3")]
        n_max: NMax,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, value_enum, default_value = "scripted")]
        expert: ExpertKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gateway address for `--expert live`.
        #[arg(long, default_value = "127.0.0.1:7878")]
        gateway: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Run every task under each variant and write the metrics table.
    Suite {
        #[arg(long, value_delimiter = ',', default_value = "baseline,log,full")]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Sweep the autonomy threshold on one task.
    Sweep {
        #[arg(long, default_value = "n-max")]
        param: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,8,inf")]
        values: Vec<NMax>,
        #[arg(long, default_value = "craft_stone_pickaxe")]
        task: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Serve the expert gateway for live consoles and live-expert episodes.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Train the dialogue policy on synthetic multi-hop tasks.
    TrainHfm {
        #[arg(long, default_value_t = 8)]
        group_size: usize,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 10_000)]
        updates: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        eval_every: u32,
        #[arg(long, default_value = "hfm_policy.json")]
        out: PathBuf,
        /// Training curve CSV.
        #[arg(long, default_value = "hfm_curve.csv")]
        curve: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_meta(out: &Path, trials: usize, seed: u64, configs: Vec<FrameworkConfig>) -> Result<()> {
    let first = configs.first().cloned().unwrap_or_default();
    let meta = RunMeta {
        trials,
        base_seed: seed,
        reply_noise: first.reply_noise,
        review_cost_s: first.review_cost.as_secs_f64(),
        seconds_per_step: harness::SECONDS_PER_STEP,
        configs,
    };
    let mut w = create(&meta_path(out))?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    writeln!(w)?;
    Ok(())
}

fn task(id: &str) -> Result<harness::TaskSpec> {
    harness::by_id(id).with_context(|| {
        let ids: Vec<String> = harness::suite().into_iter().map(|t| t.id).collect();
        format!("unknown task `{id}`; known: {}", ids.join(", "))
    })
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { task: id, n_max, variant, expert, seed, gateway, out, knobs } => {
            let t = task(&id)?;
            let cfg = knobs.apply(FrameworkConfig { variant, n_max, ..FrameworkConfig::default() })?;
            let rec = match expert {
                ExpertKind::Scripted => harness::scripted_episode(&t, &cfg, seed)?,
                ExpertKind::Live => {
                    let mut live = harness::LiveExpert::connect(&gateway)
                        .with_context(|| format!("connecting to gateway at {gateway}"))?;
                    harness::run_episode(&t, &cfg, &mut live, seed)?
                }
            };
            let json = serde_json::to_string_pretty(&rec)?;
            match out {
                Some(p) => std::fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
        }
        Cmd::Suite { variants, trials, seed, out, knobs } => {
            let configs: Vec<FrameworkConfig> =
                variants.iter().map(|v| knobs.apply(FrameworkConfig::variant(*v))).collect::<Result<_>>()?;
            let res = harness::run_suite(&harness::suite(), trials, &configs, seed)?;
            res.table.write_csv(create(&out)?)?;
            res.table.write_csv(io::stdout().lock())?;
            write_meta(&out, trials, seed, configs)?;
        }
        Cmd::Sweep { param, values, task: id, trials, seed, out, knobs } => {
            if param != "n-max" {
                bail!("only `--param n-max` is supported");
            }
            let t = task(&id)?;
            let base = knobs.apply(FrameworkConfig::default())?;
            let (table, _) = harness::ablation_sweep(&t, &values, trials, &base, seed)?;
            table.write_csv(create(&out)?)?;
            table.write_csv(io::stdout().lock())?;
            write_meta(&out, trials, seed, vec![base])?;
        }
        Cmd::Serve { port, host } => {
            let gw = harness::serve_expert_gateway((host.as_str(), port)).with_context(|| format!("binding {host}:{port}"))?;
            eprintln!("gateway listening on {}", gw.addr());
            gw.wait();
        }
        Cmd::TrainHfm { group_size, epsilon, beta, lr, updates, seed, eval_every, out, curve } => {
            let cfg = TrainerConfig {
                group_size,
                epsilon,
                beta,
                learning_rate: lr,
                updates,
                seed,
                eval_every,
                ..TrainerConfig::default()
            };
            let res = grpo::train_from(&cfg, ahce::hfm::DialoguePolicy::zeros(), |row| {
                if let Some(acc) = row.heldout_accuracy {
                    eprintln!("update {:>6}  reward {:+.3}  kl {:.4}  heldout {:.3}", row.update, row.mean_reward, row.kl, acc);
                }
            })?;
            let eval = grpo::evaluate(&res.policy, &grpo::heldout_tasks(cfg.heldout_size, &cfg.hops), cfg.limits);
            eprintln!(
                "final: accuracy {:.3}  mean queries {:.3}  mean hops {:.3}",
                eval.accuracy, eval.mean_queries, eval.mean_hops
            );
            res.policy
                .save(&out, serde_json::to_value(&cfg)?)
                .with_context(|| format!("writing {}", out.display()))?;
            grpo::write_curve(create(&curve)?, &res.curve)?;
        }
    }
    Ok(())
}
