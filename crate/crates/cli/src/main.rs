use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bootasr::am::{align_corpus, ctm_lines, flat_start, train, train_triphone, AcousticModel, AlignInput};
use bootasr::corpus::{canonicalize_audio, load_manifest, load_manifest_with, write_manifest, LoadOptions, Utterance};
use bootasr::decode::{build_prefix_tree, decode_corpus, hypothesis_json, DecodeItem};
use bootasr::eval::{cer, wer, ScoredPair};
use bootasr::lexicon::{build_wordlist, graphemic_lexicon, supplement, Lexicon};
use bootasr::lm::{perplexity, train_ngram, NGramLM, Smoothing};
use bootasr::pipeline::{
    accepted_segments, harvest_entry, recording_features, run_pipeline, sweep, utterance_features, PipelineConfig,
    PipelineError, SweepConfig,
};
use bootasr::segment::success_rate;
use bootasr::synth::{synth_corpus, SynthCorpusConfig, SynthSpec};
use bootasr::textnorm::{load_numeral_table, normalize, NumeralTable};

#[derive(Parser)]
#[command(name = "bootasr", version, about = "Bootstrapped GMM-HMM speech recognition for low-resource languages")]
struct Cli {
    /// Pipeline config (TOML); stage commands read their parameters from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a WAV file to 16 kHz mono PCM16.
    Canonicalize { input: PathBuf, output: PathBuf },
    /// Normalize text lines (file or stdin) to stdout.
    Textnorm {
        input: Option<PathBuf>,
        #[arg(long)]
        numerals: Option<PathBuf>,
    },
    /// Build a graphemic lexicon from a text corpus and manifests.
    Lexicon {
        #[arg(long)]
        text: Option<PathBuf>,
        /// Manifests whose transcript words are always included.
        #[arg(long)]
        manifest: Vec<PathBuf>,
        #[arg(long, default_value_t = 2)]
        min_count: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    #[command(subcommand)]
    /// N-gram language models.
    Lm(LmCmd),
    #[command(subcommand)]
    /// Acoustic model training and alignment.
    Am(AmCmd),
    #[command(subcommand)]
    /// Long-form segmentation.
    Segment(SegmentCmd),
    /// Decode a manifest.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// ARPA model; a uniform unigram over the lexicon when omitted.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score hypotheses against a reference manifest.
    Score {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Also write per-utterance WER rows here.
        #[arg(long)]
        per_utterance: Option<PathBuf>,
    },
    #[command(subcommand)]
    /// End-to-end runs from a config file.
    Pipeline(PipelineCmd),
    /// WER against training minutes, with and without the LM.
    Sweep {
        /// Comma-separated training budgets in minutes.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long)]
        include_long_form: bool,
    },
    #[command(subcommand)]
    /// Synthetic corpora with ground truth.
    Synth(SynthCmd),
}

#[derive(Subcommand)]
enum LmCmd {
    /// Estimate a backoff model from normalized text and write ARPA.
    Train {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long, value_parser = parse_smoothing)]
        smoothing: Option<Smoothing>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Perplexity of a text under an ARPA model.
    Ppl {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
}

#[derive(Args)]
struct AmData {
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Subcommand)]
enum AmCmd {
    /// Single-Gaussian model initialized from global statistics.
    Flatstart {
        #[command(flatten)]
        data: AmData,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Monophone Viterbi training.
    Train {
        #[command(flatten)]
        data: AmData,
        /// Start from this model instead of a flat start.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Forced-align a manifest; writes a CTM and reports the success rate.
    Align {
        #[command(flatten)]
        data: AmData,
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Occupancy-tied triphones from a monophone model.
    Triphone {
        #[command(flatten)]
        data: AmData,
        #[arg(long)]
        mono: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum SegmentCmd {
    /// Cut long-form recordings into transcript-matched segments.
    Harvest {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every stage, reusing cached results.
    Run,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generate a synthetic-language corpus with ground truth.
    Make {
        #[arg(short, long)]
        output: PathBuf,
        /// Fraction of long-form sentences given off-script insertions.
        #[arg(long)]
        corruption: Option<f64>,
        /// Scale every duration target by this factor.
        #[arg(long)]
        scale: Option<f64>,
    },
}

/// Bad input detected before work starts (exit code 2).
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn parse_smoothing(s: &str) -> Result<Smoothing, String> {
    match s {
        "witten-bell" | "wb" => Ok(Smoothing::WittenBell),
        "kneser-ney" | "kn" => Ok(Smoothing::KneserNeyMod),
        _ => Err(format!("unknown smoothing `{s}` (witten-bell, kneser-ney)")),
    }
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(invalid(format!("{} does not exist", p.display())));
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = std::path::absolute(w)?;
    }
    Ok(cfg)
}

fn read_lines(p: &Path) -> Result<Vec<Vec<String>>> {
    require_file(p)?;
    Ok(std::fs::read_to_string(p)
        .with_context(|| format!("reading {}", p.display()))?
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|l| !l.is_empty())
        .collect())
}

fn manifest(p: &Path) -> Result<Vec<Utterance>> {
    require_file(p)?;
    load_manifest(p).map_err(|e| invalid(e.to_string()))
}

fn lexicon(p: &Path) -> Result<Lexicon> {
    require_file(p)?;
    Lexicon::load(p).map_err(|e| invalid(e.to_string()))
}

fn model(p: &Path) -> Result<AcousticModel> {
    require_file(p)?;
    AcousticModel::load(p).map_err(|e| invalid(e.to_string()))
}

fn align_inputs(utts: &[Utterance], cfg: &PipelineConfig) -> Result<Vec<AlignInput>> {
    let feats = utterance_features(utts, &cfg.features)?;
    Ok(utts.iter().zip(feats).map(|(u, feats)| AlignInput { id: u.id.clone(), feats, words: u.text.clone() }).collect())
}

fn write_json<T: serde::Serialize>(p: &Path, v: &T) -> Result<()> {
    std::fs::write(p, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Canonicalize { input, output } => {
            require_file(&input)?;
            let rec = canonicalize_audio(&input, &output)?;
            println!("{}", serde_json::to_string(&rec)?);
        }
        Cmd::Textnorm { input, numerals } => {
            let table = match numerals {
                Some(p) => load_numeral_table(&p).map_err(|e| invalid(e.to_string()))?,
                None => NumeralTable::new(),
            };
            let text = match input {
                Some(p) => {
                    require_file(&p)?;
                    std::fs::read_to_string(&p)?
                }
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let mut out = std::io::stdout().lock();
            let mut dropped = 0;
            for line in text.lines() {
                let n = normalize(line, &table);
                dropped += n.dropped.len();
                writeln!(out, "{}", n.joined())?;
            }
            if dropped > 0 {
                log::warn!("{dropped} numerals had no table entry and were dropped");
            }
        }
        Cmd::Lexicon { text, manifest: manifests, min_count, output } => {
            let corpus = match &text {
                Some(t) => read_lines(t)?,
                None => Vec::new(),
            };
            let mut wl = build_wordlist(corpus.iter().flatten().map(String::as_str), min_count);
            for m in &manifests {
                let words: Vec<String> = manifest(m)?.into_iter().flat_map(|u| u.text).collect();
                wl = supplement(&wl, &words);
            }
            let (lex, rejected) = graphemic_lexicon(&wl)?;
            for r in &rejected {
                log::warn!("rejected {r:?}");
            }
            std::fs::write(&output, lex.to_text())?;
            eprintln!("{} words, {} rejected", lex.len(), rejected.len());
        }
        Cmd::Lm(LmCmd::Train { text, order, smoothing, output }) => {
            let mut lc = cfg.lm.clone();
            if let Some(o) = order {
                lc.order = o;
            }
            if let Some(s) = smoothing {
                lc.smoothing = s;
            }
            let lm = train_ngram(&read_lines(&text)?, &lc).map_err(|e| invalid(e.to_string()))?;
            lm.write_arpa(&output)?;
        }
        Cmd::Lm(LmCmd::Ppl { lm, text }) => {
            require_file(&lm)?;
            let lm = NGramLM::read_arpa(&lm).map_err(|e| invalid(e.to_string()))?;
            let r = perplexity(&lm, &read_lines(&text)?)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Am(AmCmd::Flatstart { data, output }) => {
            let lex = lexicon(&data.lexicon)?;
            let inputs = align_inputs(&manifest(&data.manifest)?, &cfg)?;
            flat_start(&inputs, &lex, cfg.topology, cfg.mono.align.map_oov)?.save(&output)?;
        }
        Cmd::Am(AmCmd::Train { data, model: init, output }) => {
            let lex = lexicon(&data.lexicon)?;
            let inputs = align_inputs(&manifest(&data.manifest)?, &cfg)?;
            let m0 = match init {
                Some(p) => model(&p)?,
                None => flat_start(&inputs, &lex, cfg.topology, cfg.mono.align.map_oov)?,
            };
            let (m, trace) = train(m0, &lex, &inputs, &cfg.mono)?;
            m.save(&output)?;
            write_json(&output.with_extension("trace.json"), &trace)?;
        }
        Cmd::Am(AmCmd::Align { data, model: mp, output }) => {
            let lex = lexicon(&data.lexicon)?;
            let m = model(&mp)?;
            let utts = manifest(&data.manifest)?;
            let inputs = align_inputs(&utts, &cfg)?;
            let res = align_corpus(&m, &lex, &inputs, &cfg.mono.align);
            let mut ctm = String::new();
            for (u, r) in utts.iter().zip(&res.results) {
                match r {
                    Ok(path) => ctm.push_str(&ctm_lines(&u.recording_id, u.start.unwrap_or(0.0), path)),
                    Err(e) => log::warn!("{}: {e}", u.id),
                }
            }
            std::fs::write(&output, ctm)?;
            println!("alignment success rate {:.4}", res.success_rate);
        }
        Cmd::Am(AmCmd::Triphone { data, mono, output }) => {
            let lex = lexicon(&data.lexicon)?;
            let m = model(&mono)?;
            let inputs = align_inputs(&manifest(&data.manifest)?, &cfg)?;
            let paths: Vec<_> =
                align_corpus(&m, &lex, &inputs, &cfg.triphone.schedule.align).results.into_iter().map(Result::ok).collect();
            let (tri, trace) =
                train_triphone(&m, &lex, &paths, &inputs, cfg.triphone.tie_min_count, &cfg.triphone.schedule)?;
            tri.save(&output)?;
            write_json(&output.with_extension("trace.json"), &trace)?;
        }
        Cmd::Segment(SegmentCmd::Harvest { model: mp, manifest: mf, output }) => {
            let m = model(&mp)?;
            let long = manifest(&mf)?;
            std::fs::create_dir_all(&output)?;
            let (mut segments, mut reports, mut cands_out) = (Vec::new(), Vec::new(), String::new());
            for u in &long {
                let raw = recording_features(&u.audio_path, &cfg.features)?;
                match harvest_entry(u, &raw, &m, &cfg.harvest) {
                    Ok((cands, report)) => {
                        for c in &cands {
                            cands_out.push_str(&serde_json::to_string(c)?);
                            cands_out.push('\n');
                        }
                        segments.extend(accepted_segments(u, &cands));
                        reports.push(report);
                    }
                    Err(e) => log::warn!("{}: {e}", u.id),
                }
            }
            write_manifest(&output.join("segments.jsonl"), &segments)?;
            std::fs::write(output.join("candidates.jsonl"), cands_out)?;
            write_json(&output.join("reports.json"), &reports)?;
            let rate = success_rate(&reports);
            if let Some(w) = &rate.warning {
                log::warn!("{w}");
            }
            println!(
                "{} segments; recording rate {:.3}; word yield {:.3}",
                segments.len(),
                rate.recording_rate,
                rate.word_yield
            );
        }
        Cmd::Decode { model: mp, lexicon: lp, lm, manifest: mf, output } => {
            let m = model(&mp)?;
            let lex = lexicon(&lp)?;
            let lm = match lm {
                Some(p) => {
                    require_file(&p)?;
                    NGramLM::read_arpa(&p).map_err(|e| invalid(e.to_string()))?
                }
                None => NGramLM::uniform(lex.words().map(|(w, _)| w)),
            };
            let utts = manifest(&mf)?;
            let feats = utterance_features(&utts, &cfg.features)?;
            let items: Vec<DecodeItem> =
                utts.iter().zip(feats).map(|(u, feats)| DecodeItem { id: u.id.clone(), feats }).collect();
            let batch = decode_corpus(&m, &lm, &build_prefix_tree(&lex, false), &items, &cfg.decode)?;
            let mut out = String::new();
            for (id, r) in &batch.results {
                match r {
                    Ok(h) => {
                        out.push_str(&hypothesis_json(id, h));
                        out.push('\n');
                    }
                    Err(e) => log::warn!("{id}: {e}"),
                }
            }
            std::fs::write(&output, out)?;
            eprintln!("real-time factor {:.4}", batch.real_time_factor());
        }
        Cmd::Score { reference, hyp, per_utterance } => {
            let refs = load_manifest_with(&reference, LoadOptions { require_normalized: false })
                .map_err(|e| invalid(e.to_string()))?;
            require_file(&hyp)?;
            let mut hyps = std::collections::HashMap::new();
            for line in std::fs::read_to_string(&hyp)?.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line).map_err(|e| invalid(format!("{}: {e}", hyp.display())))?;
                let id = v["id"].as_str().ok_or_else(|| invalid("hypothesis line without id"))?.to_string();
                let text = v["text"].as_str().unwrap_or_default();
                hyps.insert(id, text.split_whitespace().map(str::to_string).collect::<Vec<_>>());
            }
            let pairs: Vec<ScoredPair> = refs
                .iter()
                .map(|u| ScoredPair {
                    id: u.id.clone(),
                    reference: u.text.clone(),
                    hypothesis: hyps.remove(&u.id).unwrap_or_default(),
                })
                .collect();
            if !hyps.is_empty() {
                log::warn!("{} hypotheses have no reference", hyps.len());
            }
            let w = wer(&pairs)?;
            print!("{}{}", w.table(), cer(&pairs)?.table());
            if let Some(p) = per_utterance {
                std::fs::write(p, w.per_utterance_tsv())?;
            }
        }
        Cmd::Pipeline(PipelineCmd::Run) => {
            if cli.config.is_none() {
                bail!(invalid("pipeline run needs --config"));
            }
            let out = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Cmd::Sweep { budgets, include_long_form } => {
            if cli.config.is_none() {
                bail!(invalid("sweep needs --config"));
            }
            let r = sweep(&cfg, &SweepConfig { budgets, include_long_form })?;
            print!("{}", r.to_tsv());
        }
        Cmd::Synth(SynthCmd::Make { output, corruption, scale }) => {
            let mut sc = SynthCorpusConfig::default();
            if let Some(c) = corruption {
                if !(0.0..=1.0).contains(&c) {
                    bail!(invalid("--corruption must be in [0, 1]"));
                }
                sc.corruption_rate = c;
            }
            if let Some(k) = scale {
                if !(k > 0.0) {
                    bail!(invalid("--scale must be positive"));
                }
                sc.shortform_minutes *= k;
                sc.longform_minutes *= k;
                sc.n_test = ((sc.n_test as f64 * k).ceil() as usize).max(1);
                sc.lm_sentences = ((sc.lm_sentences as f64 * k).ceil() as usize).max(1);
            }
            let mut spec = SynthSpec::default();
            spec.seed = cfg.seed;
            let c = synth_corpus(&spec, &sc, &output).map_err(|e| invalid(e.to_string()))?;
            println!("{}", c.short_manifest.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return 2;
    }
    match e.downcast_ref::<PipelineError>() {
        Some(p) if p.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
