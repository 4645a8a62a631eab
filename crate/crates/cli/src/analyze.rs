use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use metasim::analysis::{self, ClassifyOptions, PatchOutcome, Roles};
use metasim::trajectory::Trajectory;

use crate::{AnalyzeArgs, CliError, Mode};

fn load_all(paths: &[PathBuf]) -> Result<Vec<Trajectory>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("no CSV files given".into()));
    }
    let mut out: Vec<Trajectory> = Vec::with_capacity(paths.len());
    for path in paths {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let traj = Trajectory::read_csv(file).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Some(first) = out.first() {
            if first.species != traj.species || first.volumes != traj.volumes {
                return Err(CliError::Usage(format!(
                    "{}: species or volumes differ from {}",
                    path.display(),
                    paths[0].display()
                )));
            }
        }
        out.push(traj);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let trajs = load_all(&args.csv)?;
    let roles = Roles {
        prey: args.prey.clone(),
        predator: args.predator.clone(),
    };
    if args.mode != Mode::Summary && roles.indices(&trajs[0]).is_none() {
        return Err(CliError::Usage(format!(
            "species `{}` and `{}` must both be present",
            roles.prey, roles.predator
        )));
    }
    let report = match args.mode {
        Mode::Summary => summary(&args.csv, &trajs),
        Mode::Colonization => colonization(&args.csv, &trajs, roles),
        Mode::Symmetry => symmetry(&args.csv, &trajs, &roles, args.pairs.as_deref())?,
        Mode::Phase => return phase(args, &trajs, &roles),
    };
    match &args.out {
        Some(path) => fs::write(path, report).map_err(|e| CliError::io(path, e)),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn summary(paths: &[PathBuf], trajs: &[Trajectory]) -> String {
    let mut out = String::from("file,volume,species,mean,sd,min,max,extinction_time,period\n");
    for (path, t) in paths.iter().zip(trajs) {
        let start = analysis::trailing_start(&t.times, 0.8);
        for (v, vname) in t.volumes.iter().enumerate() {
            for (s, sname) in t.species.iter().enumerate() {
                let series = t.series(v, s);
                let values: Vec<f64> = series.iter().map(|&c| c as f64).collect();
                let (mean, sd) = analysis::mean_sd(&values[start..]);
                let period = analysis::detect_oscillation(&t.times, &values, None).map(|o| o.period);
                let _ = writeln!(
                    out,
                    "{},{vname},{sname},{mean:.3},{sd:.3},{},{},{},{}",
                    path.display(),
                    series.iter().min().unwrap_or(&0),
                    series.iter().max().unwrap_or(&0),
                    opt(analysis::detect_extinction(&t.times, &series)),
                    opt(period),
                );
            }
        }
    }
    out
}

fn colonization(paths: &[PathBuf], trajs: &[Trajectory], roles: Roles) -> String {
    let (_, pred) = roles.indices(&trajs[0]).expect("checked by caller");
    let options = ClassifyOptions {
        roles,
        ..Default::default()
    };
    let outcomes: Vec<Vec<PatchOutcome>> = trajs
        .iter()
        .map(|t| {
            (0..t.volumes.len())
                .filter_map(|v| analysis::classify_colonization(t, v, t.sample(v, 0)[pred], &options))
                .collect()
        })
        .collect();
    let names = &trajs[0].volumes;
    let mut out = String::from("file,patch,classification,extinction_time,period,mean_peak,cv\n");
    for (path, run) in paths.iter().zip(&outcomes) {
        for o in run {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                path.display(),
                names[o.patch],
                o.classification.name(),
                opt(o.extinction_time),
                opt(o.period_estimate),
                opt(o.amplitude_stats.map(|a| a.mean_peak)),
                opt(o.amplitude_stats.map(|a| a.cv)),
            );
        }
    }
    out.push_str("\npatch,colonized_runs,runs,verdict\n");
    for v in analysis::majority_verdicts(&outcomes) {
        let verdict = if v.colonized() { "colonized" } else { "not-colonized" };
        let _ = writeln!(out, "{},{},{},{verdict}", names[v.patch], v.colonized_runs, v.runs);
    }
    out
}

fn parse_pairs(spec: Option<&str>, t: &Trajectory) -> Result<Vec<(usize, usize)>, CliError> {
    let n = t.volumes.len();
    let Some(spec) = spec else {
        return Ok((0..n / 2).map(|i| (i, n - 1 - i)).collect());
    };
    let lookup = |name: &str| {
        t.volume_index(name.trim())
            .ok_or_else(|| CliError::Usage(format!("unknown volume `{name}` in --pairs")))
    };
    spec.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("pair `{pair}` must look like a:b")))?;
            Ok((lookup(a)?, lookup(b)?))
        })
        .collect()
}

fn symmetry(paths: &[PathBuf], trajs: &[Trajectory], roles: &Roles, pairs: Option<&str>) -> Result<String, CliError> {
    let pairs = parse_pairs(pairs, &trajs[0])?;
    let names = &trajs[0].volumes;
    let mut sums = vec![0.0; pairs.len()];
    let mut out = String::from("file,a,b,prey,predator,combined\n");
    for (path, t) in paths.iter().zip(trajs) {
        let report = analysis::symmetry_report(t, &pairs, roles).expect("roles checked by caller");
        for (stat, sum) in report.iter().zip(&mut sums) {
            *sum += stat.combined();
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4}",
                path.display(),
                names[stat.a],
                names[stat.b],
                stat.prey,
                stat.predator,
                stat.combined()
            );
        }
    }
    for (&(a, b), sum) in pairs.iter().zip(sums) {
        let _ = writeln!(out, "mean,{},{},,,{:.4}", names[a], names[b], sum / trajs.len() as f64);
    }
    Ok(out)
}

fn phase(args: &AnalyzeArgs, trajs: &[Trajectory], roles: &Roles) -> Result<(), CliError> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for (path, t) in args.csv.iter().zip(trajs) {
        for (v, vname) in t.volumes.iter().enumerate() {
            let points = analysis::export_phase_space(t, v, roles).expect("roles checked by caller");
            let mut text = format!("time,{},{}\n", roles.prey, roles.predator);
            for (time, (x, y)) in t.times.iter().zip(points) {
                let _ = writeln!(text, "{time},{x},{y}");
            }
            let file = dir.join(format!("{}_{vname}_phase.csv", stem(path)));
            fs::write(&file, text).map_err(|e| CliError::io(&file, e))?;
        }
    }
    Ok(())
}
