use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use fpglmm::bayes::{build_proposal, importance_resample, read_samples, write_samples, write_weights, PosteriorSamples};
use fpglmm::data::{
    build_matches_from_minutiae, load_matches, read_minutiae, read_quality, save_matches, summarize as summary_table, Binning, Statistic,
};
use fpglmm::em::{default_init, fit as em_fit, EmControls};
use fpglmm::matcher::{count_matches, MatchConfig};
use fpglmm::numfmt::f17;
use fpglmm::prc::{design_cell, design_table, format_grid, prc_posterior, PrcQuery};
use fpglmm::simgen::{run_coverage, simulate_dataset, write_truth, CoverageConfig, Preset};
use fpglmm::{Error, QualityScheme, Result, Tau};

use crate::manifest::{sidecar_name, RunManifest};
use crate::model_file::ModelFile;
use crate::{DesignArgs, FitArgs, MatchArgs, PosteriorArgs, PrcArgs, SimulateArgs, SummarizeArgs, ValidateArgs};

fn input_err(message: impl Into<String>) -> Error {
    Error::Input { line: None, message: message.into() }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_samples(path: &Path) -> Result<PosteriorSamples> {
    read_samples(BufReader::new(File::open(path)?))
}

fn param_index(scheme: &QualityScheme, name: &str) -> Result<usize> {
    let names = scheme.param_names();
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| input_err(format!("unknown parameter '{name}' (expected one of {})", names.join(", "))))
}

pub fn summarize(a: SummarizeArgs) -> Result<()> {
    let scheme = QualityScheme::parse(&a.scheme)?;
    let mut manifest = RunManifest::start("summarize");
    manifest.input(&a.matches)?;
    let data = load_matches(&a.matches, scheme)?;
    let binning = Binning::for_scheme(scheme, a.bin_width);
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for stat in Statistic::ALL {
        let table = summary_table(&data, stat, binning)?;
        println!("{} (mean (sd)):\n{}", stat.name(), table.to_text());
        if let Some(dir) = &a.out_dir {
            let path = dir.join(format!("summary_{}.csv", stat.name()));
            let mut out = create(&path)?;
            writeln!(out, "# {}", manifest.output(&path))?;
            table.write_csv(&mut out)?;
            out.flush()?;
        }
    }
    manifest.finish()?;
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<()> {
    let scheme = QualityScheme::parse(&a.scheme)?;
    let mut manifest = RunManifest::start("fit");
    manifest.input(&a.matches)?;
    let data = load_matches(&a.matches, scheme)?;
    let n = scheme.n_params();
    let mut init = match &a.init {
        Some(v) if v.len() != n => return Err(input_err(format!("--init needs {n} values, got {}", v.len()))),
        Some(v) => v.clone(),
        None => default_init(&data)?.to_vec(),
    };
    let mut fixed = vec![false; n];
    for h in &a.hold {
        let (name, value) = h.split_once('=').ok_or_else(|| input_err(format!("--hold expects name=value, got '{h}'")))?;
        let i = param_index(&scheme, name.trim())?;
        init[i] = value.trim().parse().map_err(|_| input_err(format!("bad value in --hold '{h}'")))?;
        fixed[i] = true;
    }
    let controls = EmControls { max_iter: a.max_iter, fixed, ..EmControls::default() };
    let result = em_fit(&data, Some(Tau::from_slice(&init, &scheme)?), &controls)?;

    manifest.output(&a.out);
    let model = ModelFile::from_fit(&result, scheme, sidecar_name(&a.out));
    let text = serde_json::to_string_pretty(&model).map_err(|e| Error::Numerical(format!("cannot serialize model: {e}")))?;
    std::fs::write(&a.out, format!("{text}\n"))?;
    println!("EM iterations {}, Newton refinements {}, converged {}", result.em_iterations, result.refine_iterations, result.converged);
    for ((name, v), held) in scheme.param_names().iter().zip(&model.tau_hat).zip(&model.held) {
        println!("{name:>12} {v:>12.6}{}", if *held { "  (held)" } else { "" });
    }
    manifest.finish()?;
    Ok(())
}

pub fn posterior(a: PosteriorArgs) -> Result<()> {
    let mut manifest = RunManifest::start("posterior");
    manifest.input(&a.model)?;
    manifest.input(&a.matches)?;
    manifest.seed("seed", a.seed);
    let model = ModelFile::load(&a.model)?;
    let data = load_matches(&a.matches, model.scheme)?;
    let proposal = build_proposal(&model.to_fit()?)?;
    let samples = importance_resample(&data, &proposal, a.h, a.r, a.seed)?;

    let meta = vec![manifest.output(&a.out)];
    let mut out = create(&a.out)?;
    write_samples(&mut out, &samples, &meta)?;
    out.flush()?;
    if let Some(path) = &a.weights {
        let mut out = create(path)?;
        writeln!(out, "# {}", manifest.output(path))?;
        write_weights(&mut out, &samples)?;
        out.flush()?;
    }
    println!("ESS {:.1} of H = {} ({:.1}%), R = {}", samples.ess, samples.h, 100.0 * samples.ess / samples.h as f64, samples.r());
    let (mean, sd) = (samples.mean(), samples.sd());
    for (i, name) in model.param_names.iter().enumerate() {
        println!("{name:>12} mean {:>12.6} sd {:>10.6}", mean[i], sd[i]);
    }
    manifest.finish()?;
    Ok(())
}

pub fn prc(a: PrcArgs) -> Result<()> {
    let mut manifest = RunManifest::start("prc");
    manifest.input(&a.samples)?;
    manifest.seed("seed", a.seed);
    let samples = load_samples(&a.samples)?;
    let cells: Vec<(f64, f64)> = match &a.grid {
        Some(g) => g.iter().flat_map(|&q1| g.iter().map(move |&q2| (q1, q2))).collect(),
        None => vec![(a.q1.unwrap_or_default(), a.q2.unwrap_or_default())],
    };
    let mut reports = Vec::with_capacity(cells.len());
    for &(q1, q2) in &cells {
        let q = PrcQuery { w: a.w, m1: a.m1, m2: a.m2, q1, q2 };
        reports.push(prc_posterior(&q, &samples, a.mc, a.alpha, a.seed)?);
    }
    let level = 100.0 * (1.0 - a.alpha);
    match &a.grid {
        Some(g) => {
            let text: Vec<Vec<String>> = reports
                .chunks(g.len())
                .map(|row| row.iter().map(|r| format!("{:.4} [{:.4}, {:.4}]", r.mean, r.ci_low, r.ci_high)).collect())
                .collect();
            println!("PRC({} | {},{}) mean [{level}% interval]", a.w, a.m1, a.m2);
            print!("{}", format_grid(g, &text));
        }
        None => {
            let r = &reports[0];
            println!(
                "PRC({} | {},{}; q={},{}) = {:.6e} (sd {:.3e}), {level}% interval [{:.6e}, {:.6e}]",
                a.w, a.m1, a.m2, cells[0].0, cells[0].1, r.mean, r.sd, r.ci_low, r.ci_high
            );
        }
    }
    if let Some(path) = &a.out {
        let mut out = create(path)?;
        writeln!(out, "# {}", manifest.output(path))?;
        writeln!(out, "w,m1,m2,q1,q2,mean,sd,ci_low,ci_high,alpha,mc_draws,r_samples")?;
        for (&(q1, q2), r) in cells.iter().zip(&reports) {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                a.w,
                a.m1,
                a.m2,
                f17(q1),
                f17(q2),
                f17(r.mean),
                f17(r.sd),
                f17(r.ci_low),
                f17(r.ci_high),
                f17(r.alpha),
                r.mc_draws,
                r.r_samples
            )?;
        }
        out.flush()?;
    }
    manifest.finish()?;
    Ok(())
}

pub fn design_w(a: DesignArgs) -> Result<()> {
    let mut manifest = RunManifest::start("design-w");
    manifest.input(&a.samples)?;
    manifest.seed("seed", a.seed);
    let samples = load_samples(&a.samples)?;
    let labels = match (&a.labels, samples.scheme) {
        (Some(l), _) => l.clone(),
        (None, QualityScheme::Categorical { qmax }) => (1..=qmax).map(f64::from).collect(),
        (None, QualityScheme::Continuous) => return Err(input_err("--labels is required for continuous quality")),
    };
    let table = design_table(a.m1, a.m2, &labels, &samples, a.target, a.mc, a.seed)?;
    let cells: Vec<Vec<String>> = table.iter().map(|row| row.iter().map(|w| design_cell(*w)).collect()).collect();
    println!("smallest w with PRC <= {} at m = ({}, {}); * means no such w", a.target, a.m1, a.m2);
    print!("{}", format_grid(&labels, &cells));
    if let Some(path) = &a.out {
        let mut out = create(path)?;
        writeln!(out, "# {}", manifest.output(path))?;
        writeln!(out, "q1,q2,m1,m2,target,w")?;
        for (i, row) in cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                writeln!(out, "{},{},{},{},{},{cell}", f17(labels[i]), f17(labels[j]), a.m1, a.m2, f17(a.target))?;
            }
        }
        out.flush()?;
    }
    manifest.finish()?;
    Ok(())
}

pub fn match_minutiae(a: MatchArgs) -> Result<()> {
    let cfg = MatchConfig { r0: a.r0, u0: a.u0, anchor_search: !a.no_align };
    cfg.validate()?;
    let mut manifest = RunManifest::start("match");
    let mut minutiae = BTreeMap::new();
    for path in &a.minutiae {
        manifest.input(path)?;
        read_minutiae(BufReader::new(File::open(path)?), &mut minutiae)?;
    }
    match (&a.quality, &a.scheme, &a.out) {
        (Some(qpath), Some(scheme), Some(out_path)) => {
            let scheme = QualityScheme::parse(scheme)?;
            manifest.input(qpath)?;
            let quality = read_quality(BufReader::new(File::open(qpath)?), scheme)?;
            let data = build_matches_from_minutiae(&minutiae, &quality, &cfg, scheme)?;
            save_matches(out_path, &data, &[manifest.output(out_path)])?;
            println!("{} impostor pairs written to {}", data.len(), out_path.display());
        }
        _ => {
            if minutiae.len() != 2 {
                return Err(input_err(format!(
                    "pairwise mode needs exactly two impressions, found {}; pass --quality, --scheme and --out to build a match table",
                    minutiae.len()
                )));
            }
            let sets: Vec<_> = minutiae.iter().collect();
            let w = count_matches(sets[0].1, sets[1].1, &cfg);
            println!(
                "({},{}) m={}  ({},{}) m={}  matches w={w}",
                sets[0].0 .0,
                sets[0].0 .1,
                sets[0].1.len(),
                sets[1].0 .0,
                sets[1].0 .1,
                sets[1].1.len()
            );
        }
    }
    manifest.finish()?;
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let preset = Preset::parse(&a.preset)?;
    let mut manifest = RunManifest::start("simulate");
    manifest.seed("seed", a.seed);
    let cfg = preset.config(a.fingers, a.impressions, a.seed);
    let sim = simulate_dataset(&cfg)?;
    let comments = vec![manifest.output(&a.out), format!("preset: {}", preset.name()), format!("scheme: {}", cfg.scheme)];
    save_matches(&a.out, &sim.data, &comments)?;
    if let Some(path) = &a.truth {
        let mut out = create(path)?;
        write_truth(&mut out, &cfg, &sim, &[manifest.output(path)])?;
        out.flush()?;
    }
    println!(
        "{} pairs ({} fingers x {} impressions, scheme {}) written to {}",
        sim.data.len(),
        a.fingers,
        a.impressions,
        cfg.scheme,
        a.out.display()
    );
    manifest.finish()?;
    Ok(())
}

fn parse_query(s: &str) -> Result<PrcQuery> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || input_err(format!("--query expects w,m1,m2,q1,q2, got '{s}'"));
    if parts.len() != 5 {
        return Err(bad());
    }
    Ok(PrcQuery {
        w: parts[0].parse().map_err(|_| bad())?,
        m1: parts[1].parse().map_err(|_| bad())?,
        m2: parts[2].parse().map_err(|_| bad())?,
        q1: parts[3].parse().map_err(|_| bad())?,
        q2: parts[4].parse().map_err(|_| bad())?,
    })
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let preset = Preset::parse(&a.preset)?;
    let mut manifest = RunManifest::start("validate");
    manifest.seed("seed", a.seed);
    let mut cfg = CoverageConfig::new(preset.config(a.fingers, a.impressions, a.seed), a.runs);
    cfg.h = a.h;
    cfg.r = a.r;
    cfg.alpha = a.alpha;
    cfg.mc_draws = a.mc;
    cfg.truth_mc_draws = a.truth_mc;
    cfg.queries = a.queries.iter().map(|q| parse_query(q)).collect::<Result<_>>()?;
    let scheme = preset.scheme();
    cfg.hold_at_truth = vec![false; scheme.n_params()];
    for name in &a.hold {
        cfg.hold_at_truth[param_index(&scheme, name)?] = true;
    }
    let report = run_coverage(&cfg)?;
    let mut out = create(&a.out)?;
    writeln!(out, "# {}", manifest.output(&a.out))?;
    report.write_csv(&mut out)?;
    out.flush()?;
    println!("{} runs, {} failed", report.runs, report.failures.len());
    for q in &report.quantities {
        if q.evaluated > 0 {
            println!("{:>32} truth {:>12.6} coverage {:.3} ({}/{})", q.name, q.truth, q.fraction(), q.covered, q.evaluated);
        }
    }
    for (run, msg) in &report.failures {
        println!("run {run} failed: {msg}");
    }
    manifest.finish()?;
    Ok(())
}
