//! Experiment configuration: TOML text with sections, parsed strictly
//! (unknown keys are errors) and resolved into a fully concrete record that
//! is echoed into every run manifest.

use serde::{Deserialize, Serialize};

pub const EXPERIMENTS: [&str; 7] =
    ["equilibrium-check", "msd", "compare-levels", "kappa", "trees", "lemma", "heat"];

/// Name of the particle-count rule `N = lambda^d / eps^(d-1)` under which the
/// per-particle collision rate stays order one as eps shrinks.
pub const SCALING_RULE: &str = "boltzmann-grad";

// ---------------------------------------------------------------------------
// On-disk schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    experiment: Option<ExperimentSection>,
    gas: GasSection,
    scaling: Option<ScalingSection>,
    initial: Option<InitialSection>,
    ensemble: Option<EnsembleSection>,
    analysis: Option<AnalysisSection>,
    lemma: Option<LemmaSection>,
    sweep: Option<SweepSection>,
    output: Option<OutputSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GasSection {
    dimension: Option<usize>,
    n: Option<usize>,
    eps: f64,
    lambda: f64,
    beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalingSection {
    rule: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialSection {
    density: Option<String>,
    amplitude: Option<f64>,
    axis: Option<usize>,
    velocity_shift: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSection {
    replicas: Option<usize>,
    base_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisSection {
    t_end_mft: Option<f64>,
    sample_dt_mft: Option<f64>,
    window_mft: Option<[f64; 2]>,
    level: Option<String>,
    tau_mft: Option<f64>,
    growth_base: Option<f64>,
    tree_window_mft: Option<f64>,
    trees_per_replica: Option<usize>,
    tree_roots: Option<usize>,
    grid_half_n: Option<usize>,
    angular_order: Option<usize>,
    grid_cutoff: Option<f64>,
    gk_dt: Option<f64>,
    dtau: Option<f64>,
    tau_max: Option<f64>,
    taus: Option<Vec<f64>>,
    bins_per_axis: Option<usize>,
    relaxation_rate: Option<f64>,
    jump_replicas: Option<usize>,
    tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LemmaSection {
    e_max: Option<f64>,
    eps0: Option<f64>,
    eps_values: Option<Vec<f64>>,
    delta_values: Option<Vec<f64>>,
    t_values: Option<Vec<f64>>,
    samples: Option<u64>,
    calibration_eps: Option<Vec<f64>>,
    calibration_delta: Option<Vec<f64>>,
    calibration_t: Option<Vec<f64>>,
    calibration_samples: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    axis: String,
    values: Vec<f64>,
    experiment: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    directory: Option<String>,
    formats: Option<Vec<String>>,
}

// ---------------------------------------------------------------------------
// Resolved configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub experiment: String,
    pub dimension: usize,
    pub n: usize,
    pub eps: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Present when the config carried a scaling section, in which case any
    /// explicit N was checked against the rule within 1%.
    pub scaling_rule: Option<String>,
    pub initial: InitialResolved,
    pub replicas: usize,
    pub base_seed: u64,
    pub analysis: AnalysisResolved,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemma: Option<LemmaResolved>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResolved>,
    pub formats: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InitialResolved {
    pub density: String,
    pub amplitude: f64,
    pub axis: usize,
    pub velocity_shift: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisResolved {
    pub t_end_mft: f64,
    pub sample_dt_mft: f64,
    pub window_mft: [f64; 2],
    pub level: String,
    pub tau_mft: f64,
    pub growth_base: f64,
    pub tree_window_mft: f64,
    pub trees_per_replica: usize,
    pub tree_roots: usize,
    pub grid_half_n: usize,
    pub angular_order: usize,
    pub grid_cutoff: f64,
    pub gk_dt: f64,
    pub dtau: f64,
    pub tau_max: f64,
    pub taus: Vec<f64>,
    pub bins_per_axis: usize,
    pub relaxation_rate: f64,
    pub jump_replicas: usize,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaResolved {
    pub e_max: f64,
    pub eps0: f64,
    pub eps_values: Vec<f64>,
    pub delta_values: Vec<f64>,
    pub t_values: Vec<f64>,
    pub samples: u64,
    pub calibration_eps: Vec<f64>,
    pub calibration_delta: Vec<f64>,
    pub calibration_t: Vec<f64>,
    pub calibration_samples: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResolved {
    pub axis: String,
    pub values: Vec<f64>,
    pub experiment: String,
}

/// Output directory requested by the file (overridable by --out). Kept out of
/// `Resolved` so manifests do not depend on where results land.
pub struct Parsed {
    pub resolved: Resolved,
    pub directory: Option<String>,
}

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn scaling_count(dimension: usize, eps: f64, lambda: f64) -> f64 {
    lambda.powi(dimension as i32) / eps.powi(dimension as i32 - 1)
}

/// Parse and validate a config file against the experiment named on the
/// command line. All defaults are filled in; every error names the offending
/// key or invariant.
pub fn parse_config(text: &str, subcommand: &str) -> Result<Parsed, String> {
    let file: FileConfig = toml::from_str(text).map_err(|e| format!("config parse: {e}"))?;

    let experiment = match file.experiment.as_ref().and_then(|s| s.name.as_deref()) {
        Some(name) if name != subcommand => {
            return fail(format!(
                "config names experiment \"{name}\" but the \"{subcommand}\" subcommand was invoked"
            ));
        }
        _ => subcommand.to_string(),
    };
    let is_sweep = experiment == "sweep";
    if !is_sweep && !EXPERIMENTS.contains(&experiment.as_str()) {
        return fail(format!("unknown experiment \"{experiment}\""));
    }

    // gas parameters
    let dimension = file.gas.dimension.unwrap_or(2);
    if dimension != 2 && dimension != 3 {
        return fail(format!("gas.dimension must be 2 or 3, got {dimension}"));
    }
    let eps = file.gas.eps;
    let lambda = file.gas.lambda;
    let beta = file.gas.beta.unwrap_or(1.0);
    if !(eps > 0.0) || !eps.is_finite() {
        return fail(format!("gas.eps must be positive and finite, got {eps}"));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return fail(format!("gas.lambda must be positive and finite, got {lambda}"));
    }
    if eps >= lambda / 4.0 {
        return fail(format!(
            "gas.eps = {eps} violates eps < lambda/4 = {}: the sphere diameter must stay \
             below a quarter of the torus side",
            lambda / 4.0
        ));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return fail(format!("gas.beta must be positive and finite, got {beta}"));
    }

    let scaling_rule = match file.scaling.as_ref() {
        None => None,
        Some(s) => {
            let rule = s.rule.as_deref().unwrap_or(SCALING_RULE);
            if rule != SCALING_RULE {
                return fail(format!(
                    "scaling.rule \"{rule}\" is not recognized; the only supported rule is \
                     \"{SCALING_RULE}\" (N = lambda^d / eps^(d-1))"
                ));
            }
            Some(rule.to_string())
        }
    };
    let n_rule = scaling_count(dimension, eps, lambda);
    let n = match file.gas.n {
        Some(n) => {
            if n == 0 {
                return fail("gas.n must be at least 1");
            }
            if scaling_rule.is_some() {
                let rel = (n as f64 - n_rule).abs() / n_rule;
                if rel > 0.01 {
                    return fail(format!(
                        "gas.n = {n} is inconsistent with the {SCALING_RULE} rule \
                         N = lambda^d/eps^(d-1) = {n_rule:.3} (off by {:.1}%)",
                        100.0 * rel
                    ));
                }
            }
            n
        }
        None => {
            let n = n_rule.round();
            if !(n >= 1.0) || n > 1e9 {
                return fail(format!(
                    "derived particle count N = lambda^d/eps^(d-1) = {n_rule:.3} is out of range"
                ));
            }
            n as usize
        }
    };
    // the equilibrium sampler needs head room; refuse configs it cannot draw
    let unit_ball = if dimension == 2 { std::f64::consts::PI } else { 4.0 * std::f64::consts::PI / 3.0 };
    let packing = n as f64 * unit_ball * eps.powi(dimension as i32) / lambda.powi(dimension as i32);
    if packing >= 0.3 {
        return fail(format!(
            "packing fraction {packing:.3} >= 0.3 (N = {n}, eps = {eps}, lambda = {lambda}); \
             the gas sampler only supports dilute systems"
        ));
    }

    // initial data
    let init_sec = file.initial.unwrap_or_default();
    let density = init_sec.density.unwrap_or_else(|| "uniform".into());
    if density != "uniform" && density != "cosine" {
        return fail(format!("initial.density must be \"uniform\" or \"cosine\", got \"{density}\""));
    }
    let amplitude = init_sec.amplitude.unwrap_or(if density == "cosine" { 0.5 } else { 0.0 });
    let axis = init_sec.axis.unwrap_or(1);
    if density == "cosine" {
        if !(amplitude.abs() < 1.0) {
            return fail(format!("initial.amplitude must satisfy |a| < 1, got {amplitude}"));
        }
        if axis < 1 || axis > dimension {
            return fail(format!("initial.axis must lie in 1..={dimension}, got {axis}"));
        }
    }
    let velocity_shift = init_sec.velocity_shift.unwrap_or_else(|| vec![0.0; dimension]);
    if velocity_shift.len() != dimension {
        return fail(format!(
            "initial.velocity_shift has {} components, expected {dimension}",
            velocity_shift.len()
        ));
    }
    if velocity_shift.iter().any(|u| !u.is_finite()) {
        return fail("initial.velocity_shift must be finite");
    }
    let initial = InitialResolved { density, amplitude, axis, velocity_shift };

    // ensemble
    let ens = file.ensemble.unwrap_or_default();
    let replicas = ens.replicas.unwrap_or(8);
    if replicas == 0 {
        return fail("ensemble.replicas must be at least 1");
    }
    let base_seed = ens.base_seed.unwrap_or(1);

    // analysis knobs with per-experiment defaults
    let a = file.analysis.unwrap_or_default();
    let t_end_mft = a.t_end_mft.unwrap_or(match experiment.as_str() {
        "kappa" => 200.0,
        _ => 50.0,
    });
    let sample_dt_mft = a.sample_dt_mft.unwrap_or(match experiment.as_str() {
        "equilibrium-check" => 20.0,
        _ => 1.0,
    });
    let window_mft = a.window_mft.unwrap_or([10.0, 40.0]);
    let level = a.level.unwrap_or_else(|| "md".into());
    if level != "md" && level != "jump" {
        return fail(format!("analysis.level must be \"md\" or \"jump\", got \"{level}\""));
    }
    let tau_mft = a.tau_mft.unwrap_or(1.0);
    let growth_base = a.growth_base.unwrap_or(3.0);
    let tree_window_mft = a.tree_window_mft.unwrap_or(5.0);
    let trees_per_replica = a.trees_per_replica.unwrap_or(4);
    let tree_roots = a.tree_roots.unwrap_or(8);
    let grid_half_n = a.grid_half_n.unwrap_or(if dimension == 2 { 12 } else { 8 });
    let angular_order = a.angular_order.unwrap_or(if dimension == 2 { 32 } else { 16 });
    let grid_cutoff = a.grid_cutoff.unwrap_or(6.0 / beta.sqrt());
    let gk_dt = a.gk_dt.unwrap_or(0.05);
    let dtau = a.dtau.unwrap_or(0.0125);
    let tau_max = a.tau_max.unwrap_or(0.25);
    let taus = a.taus.unwrap_or_else(|| vec![0.0, 0.02, 0.04, 0.06, 0.08]);
    let bins_per_axis = a.bins_per_axis.unwrap_or(8);
    let relaxation_rate = a.relaxation_rate.unwrap_or(0.0); // 0 = use the equilibrium jump rate
    let jump_replicas = a.jump_replicas.unwrap_or(2000);
    let tolerance = a.tolerance.unwrap_or(match experiment.as_str() {
        "msd" | "compare-levels" | "heat" => 0.10,
        _ => 0.05,
    });

    if !(t_end_mft > 0.0) {
        return fail(format!("analysis.t_end_mft must be positive, got {t_end_mft}"));
    }
    if !(sample_dt_mft > 0.0) {
        return fail(format!("analysis.sample_dt_mft must be positive, got {sample_dt_mft}"));
    }
    if !(window_mft[0] > 0.0 && window_mft[0] < window_mft[1]) {
        return fail(format!(
            "analysis.window_mft must be an increasing positive pair, got {window_mft:?}"
        ));
    }
    if !(tau_mft > 0.0) || !(tree_window_mft > 0.0) {
        return fail("analysis.tau_mft and analysis.tree_window_mft must be positive".to_string());
    }
    if !(growth_base > 1.0) {
        return fail(format!("analysis.growth_base must exceed 1, got {growth_base}"));
    }
    if trees_per_replica == 0 || tree_roots == 0 {
        return fail("analysis.trees_per_replica and analysis.tree_roots must be at least 1");
    }
    if grid_half_n < 2 {
        return fail(format!("analysis.grid_half_n must be at least 2, got {grid_half_n}"));
    }
    if angular_order < 4 || angular_order % 2 != 0 {
        return fail(format!("analysis.angular_order must be even and >= 4, got {angular_order}"));
    }
    if !(grid_cutoff > 0.0) {
        return fail(format!("analysis.grid_cutoff must be positive, got {grid_cutoff}"));
    }
    if !(gk_dt > 0.0) || !(dtau > 0.0) {
        return fail("analysis.gk_dt and analysis.dtau must be positive".to_string());
    }
    if !(tau_max >= dtau) {
        return fail(format!("analysis.tau_max = {tau_max} must be at least dtau = {dtau}"));
    }
    if taus.is_empty() || taus.iter().any(|t| !(*t >= 0.0)) || taus.windows(2).any(|w| w[1] <= w[0]) {
        return fail("analysis.taus must be a nonempty strictly increasing list of times >= 0");
    }
    if bins_per_axis < 2 {
        return fail(format!("analysis.bins_per_axis must be at least 2, got {bins_per_axis}"));
    }
    if relaxation_rate < 0.0 || !relaxation_rate.is_finite() {
        return fail(format!("analysis.relaxation_rate must be >= 0, got {relaxation_rate}"));
    }
    if jump_replicas < 8 {
        return fail(format!("analysis.jump_replicas must be at least 8, got {jump_replicas}"));
    }
    if !(tolerance > 0.0) {
        return fail(format!("analysis.tolerance must be positive, got {tolerance}"));
    }

    let analysis = AnalysisResolved {
        t_end_mft,
        sample_dt_mft,
        window_mft,
        level,
        tau_mft,
        growth_base,
        tree_window_mft,
        trees_per_replica,
        tree_roots,
        grid_half_n,
        angular_order,
        grid_cutoff,
        gk_dt,
        dtau,
        tau_max,
        taus,
        bins_per_axis,
        relaxation_rate,
        jump_replicas,
        tolerance,
    };

    // near-encounter measurement grids
    let lemma = if experiment == "lemma" || file.lemma.is_some() {
        let l = file.lemma.unwrap_or_default();
        let e_max = l.e_max.unwrap_or(1.0);
        let eps0 = l.eps0.unwrap_or(0.1 * lambda);
        let eps_values =
            l.eps_values.unwrap_or_else(|| vec![eps0 / 16.0, eps0 / 32.0, eps0 / 64.0]);
        let delta_values = l.delta_values.unwrap_or_else(|| vec![1.0, 2.0, 4.0]);
        let t_values = l.t_values.unwrap_or_else(|| vec![0.75, 1.0, 1.5]);
        let samples = l.samples.unwrap_or(200_000);
        let calibration_eps =
            l.calibration_eps.unwrap_or_else(|| vec![eps0 / 8.0, eps0 / 24.0, eps0 / 72.0]);
        let calibration_delta = l.calibration_delta.unwrap_or_else(|| vec![0.5, 1.25, 2.5]);
        let calibration_t = l.calibration_t.unwrap_or_else(|| vec![0.5, 1.0, 1.6]);
        let calibration_samples = l.calibration_samples.unwrap_or(100_000);
        if !(e_max > 0.0) {
            return fail(format!("lemma.e_max must be positive, got {e_max}"));
        }
        if !(eps0 > 0.0 && eps0 < lambda) {
            return fail(format!("lemma.eps0 must lie in (0, lambda = {lambda}), got {eps0}"));
        }
        for (name, vals) in [
            ("eps_values", &eps_values),
            ("delta_values", &delta_values),
            ("t_values", &t_values),
            ("calibration_eps", &calibration_eps),
            ("calibration_delta", &calibration_delta),
            ("calibration_t", &calibration_t),
        ] {
            if vals.is_empty() || vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return fail(format!("lemma.{name} must be a nonempty list of positive values"));
            }
        }
        if eps_values.iter().chain(&calibration_eps).any(|e| *e >= eps0) {
            return fail("every lemma eps value must stay below eps0".to_string());
        }
        if samples < 1000 || calibration_samples < 1000 {
            return fail("lemma.samples and lemma.calibration_samples must be at least 1000");
        }
        Some(LemmaResolved {
            e_max,
            eps0,
            eps_values,
            delta_values,
            t_values,
            samples,
            calibration_eps,
            calibration_delta,
            calibration_t,
            calibration_samples,
        })
    } else {
        None
    };

    // sweep axis
    let sweep = match file.sweep {
        None => {
            if is_sweep {
                return fail("the sweep subcommand needs a [sweep] section".to_string());
            }
            None
        }
        Some(s) => {
            if !is_sweep {
                return fail(format!(
                    "a [sweep] section is only valid with the sweep subcommand, not \"{experiment}\""
                ));
            }
            if s.axis != "eps" && s.axis != "lambda" {
                return fail(format!("sweep.axis must be \"eps\" or \"lambda\", got \"{}\"", s.axis));
            }
            if !EXPERIMENTS.contains(&s.experiment.as_str()) {
                return fail(format!(
                    "sweep.experiment \"{}\" is not one of {EXPERIMENTS:?}",
                    s.experiment
                ));
            }
            if s.values.is_empty() || s.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return fail("sweep.values must be a nonempty list of positive values".to_string());
            }
            Some(SweepResolved { axis: s.axis, values: s.values, experiment: s.experiment })
        }
    };

    // output
    let out = file.output.unwrap_or_default();
    let mut formats = out.formats.unwrap_or_else(|| vec!["csv".into(), "json".into()]);
    formats.sort();
    formats.dedup();
    if formats.is_empty() || formats.iter().any(|f| f != "csv" && f != "json") {
        return fail("output.formats entries must be \"csv\" or \"json\"".to_string());
    }

    Ok(Parsed {
        resolved: Resolved {
            experiment,
            dimension,
            n,
            eps,
            lambda,
            beta,
            scaling_rule,
            initial,
            replicas,
            base_seed,
            analysis,
            lemma,
            sweep,
            formats,
        },
        directory: out.directory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[gas]\neps = 0.05\nlambda = 5.0\nn = 500\n";

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let p = parse_config(MINIMAL, "equilibrium-check").unwrap();
        let r = &p.resolved;
        assert_eq!(r.experiment, "equilibrium-check");
        assert_eq!(r.dimension, 2);
        assert_eq!(r.n, 500);
        assert_eq!(r.beta, 1.0);
        assert_eq!(r.replicas, 8);
        assert_eq!(r.base_seed, 1);
        assert_eq!(r.analysis.window_mft, [10.0, 40.0]);
        assert_eq!(r.analysis.grid_half_n, 12);
        assert_eq!(r.formats, vec!["csv".to_string(), "json".to_string()]);
        assert!(r.scaling_rule.is_none());
        assert!(p.directory.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        let top = "[gas]\neps = 0.05\nlambda = 5.0\nn = 10\nbogus = 1\n";
        assert!(parse_config(top, "msd").unwrap_err().contains("bogus"));
        let nested = "[gas]\neps = 0.05\nlambda = 5.0\nn = 10\n[analysis]\nwhatever = 2\n";
        assert!(parse_config(nested, "msd").unwrap_err().contains("whatever"));
    }

    #[test]
    fn oversized_sphere_names_the_violated_invariant() {
        let text = "[gas]\neps = 1.5\nlambda = 5.0\nn = 4\n";
        let err = parse_config(text, "msd").unwrap_err();
        assert!(err.contains("eps < lambda/4"), "{err}");
    }

    #[test]
    fn scaling_rule_derives_the_particle_count() {
        // lambda = 16, eps = 2^-8, d = 2  =>  N = lambda^2 / eps = 65536
        let text = "[gas]\neps = 0.00390625\nlambda = 16.0\n[scaling]\nrule = \"boltzmann-grad\"\n";
        let p = parse_config(text, "msd").unwrap();
        assert_eq!(p.resolved.n, 65536);
        assert_eq!(p.resolved.scaling_rule.as_deref(), Some(SCALING_RULE));
    }

    #[test]
    fn scaling_rule_rejects_an_inconsistent_count() {
        let text =
            "[gas]\neps = 0.00390625\nlambda = 16.0\nn = 60000\n[scaling]\nrule = \"boltzmann-grad\"\n";
        let err = parse_config(text, "msd").unwrap_err();
        assert!(err.contains("inconsistent"), "{err}");
        // within 1% passes
        let close =
            "[gas]\neps = 0.00390625\nlambda = 16.0\nn = 65500\n[scaling]\nrule = \"boltzmann-grad\"\n";
        assert_eq!(parse_config(close, "msd").unwrap().resolved.n, 65500);
    }

    #[test]
    fn experiment_name_must_match_the_subcommand() {
        let text = "[experiment]\nname = \"msd\"\n[gas]\neps = 0.05\nlambda = 5.0\nn = 10\n";
        assert!(parse_config(text, "kappa").is_err());
        assert!(parse_config(text, "msd").is_ok());
    }

    #[test]
    fn sweep_section_is_validated() {
        let base = "[gas]\neps = 0.05\nlambda = 5.0\nn = 10\n";
        let good = format!("{base}[sweep]\naxis = \"eps\"\nvalues = [0.05, 0.025]\nexperiment = \"trees\"\n");
        let p = parse_config(&good, "sweep").unwrap();
        assert_eq!(p.resolved.sweep.as_ref().unwrap().values.len(), 2);
        let bad_axis = format!("{base}[sweep]\naxis = \"n\"\nvalues = [1.0]\nexperiment = \"trees\"\n");
        assert!(parse_config(&bad_axis, "sweep").is_err());
        assert!(parse_config(base, "sweep").is_err()); // missing section
        assert!(parse_config(&good, "trees").is_err()); // section without subcommand
    }

    #[test]
    fn cosine_initial_density_is_validated() {
        let base = "[gas]\neps = 0.05\nlambda = 5.0\nn = 10\n";
        let good = format!("{base}[initial]\ndensity = \"cosine\"\namplitude = 0.5\naxis = 1\n");
        let p = parse_config(&good, "heat").unwrap();
        assert_eq!(p.resolved.initial.amplitude, 0.5);
        let bad = format!("{base}[initial]\ndensity = \"cosine\"\namplitude = 1.5\n");
        assert!(parse_config(&bad, "heat").is_err());
        let bad_axis = format!("{base}[initial]\ndensity = \"cosine\"\naxis = 3\n");
        assert!(parse_config(&bad_axis, "heat").is_err());
    }
}
