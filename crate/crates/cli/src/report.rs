//! `fit` and `diagnose` reports.

use pgee_core::csvio::read_dataset_path;
use pgee_core::{
    estimate_all, fit as fit_model, overcorrection_diagnostic, wald_test, AlphaMode, Dataset, DispersionMode,
    EstimatorId, EstimatorOptions, Fit, FitOptions, Kernel, Model, OvercorrectionDiagnostic, Variance, WaldResult,
};
use serde_json::{json, Value};

use crate::{CliResult, Failure, ModelArgs};

pub const JSON_SCHEMA_VERSION: u32 = 1;

const DASH: &str = "—";

struct Fitted {
    data: Dataset,
    model: Model,
    options: FitOptions,
    fit: Fit,
}

fn load_and_fit(args: &ModelArgs) -> Result<Fitted, Failure> {
    let model = args.working_model()?;
    let options = args.fit_options()?;
    let data: Dataset = read_dataset_path(&args.input)?;
    let fit = fit_model(&data, &model, &options)?;
    Ok(Fitted {
        data,
        model,
        options,
        fit,
    })
}

fn mode_text<T: std::fmt::Display>(fixed: Option<T>) -> String {
    fixed.map_or_else(|| "estimate".to_owned(), |v| v.to_string())
}

fn alpha_text(m: &Model) -> String {
    mode_text(match m.alpha {
        AlphaMode::Fixed(a) => Some(a),
        AlphaMode::Estimate => None,
    })
}

fn phi_text(m: &Model) -> String {
    mode_text(match m.dispersion {
        DispersionMode::Fixed(p) => Some(p),
        DispersionMode::PearsonPlugin => None,
    })
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn config_json(args: &ModelArgs, f: &Fitted) -> Value {
    json!({
        "input": args.input.display().to_string(),
        "corr": f.model.structure.tag(),
        "alpha": alpha_text(&f.model),
        "phi": phi_text(&f.model),
        "penalized": f.options.penalized,
        "tol": f.options.tol,
        "max_iter": f.options.max_iter,
        "beta_cap": f.options.beta_cap,
    })
}

fn fit_json(f: &Fitted) -> Value {
    let names = f.data.covariate_names();
    json!({
        "converged": f.fit.converged,
        "iterations": f.fit.iterations,
        "diverged_reason": f.fit.diverged_reason.map(|r| r.to_string()),
        "coefficients": names.iter().zip(f.fit.beta_hat.iter()).map(|(n, b)| json!({"name": n, "estimate": num(*b)})).collect::<Vec<_>>(),
        "alpha": num(f.fit.alpha_hat),
        "phi": num(f.fit.phi_hat),
        "warnings": f.fit.warnings.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>(),
        "n_clusters": f.data.n_clusters(),
        "n_obs": f.data.n_obs(),
        "balanced": f.data.is_balanced(),
    })
}

fn print_header(args: &ModelArgs, f: &Fitted) {
    let d = &f.data;
    println!("input: {}", args.input.display());
    println!(
        "data: {} clusters, {} observations, p = {}, {}",
        d.n_clusters(),
        d.n_obs(),
        d.p(),
        if d.is_balanced() { "balanced" } else { "unbalanced" }
    );
    println!(
        "model: corr {}, alpha {}, phi {}, {}, tol {:e}, max-iter {}",
        f.model.structure,
        alpha_text(&f.model),
        phi_text(&f.model),
        if f.options.penalized {
            "firth penalty"
        } else {
            "no penalty"
        },
        f.options.tol,
        f.options.max_iter
    );
    match f.fit.diverged_reason {
        None => println!("converged after {} iterations", f.fit.iterations),
        Some(r) => println!("did not converge after {} iterations: {r}", f.fit.iterations),
    }
    println!("alpha_hat = {:.6}, phi_hat = {:.6}", f.fit.alpha_hat, f.fit.phi_hat);
    for w in &f.fit.warnings {
        println!("warning: {w:?}");
    }
    println!();
    println!("{:<16} {:>12}", "coefficient", "estimate");
    for (name, b) in d.covariate_names().iter().zip(f.fit.beta_hat.iter()) {
        println!("{name:<16} {b:>12.6}");
    }
}

fn wald(est: &Variance, kernel: &Kernel, s: usize) -> Option<WaldResult> {
    let se = est.se_of(s)?;
    wald_test(kernel.beta()[s], se, kernel.n_clusters(), kernel.p(), 0.0).ok()
}

fn rho_line(names: &[String], diag: &Result<OvercorrectionDiagnostic<f64>, String>) -> String {
    match diag {
        Ok(d) => {
            let parts: Vec<String> = names
                .iter()
                .zip(d.rho.iter())
                .map(|(n, r)| format!("{r:.2} ({n})"))
                .collect();
            format!("rho_s: {}", parts.join(", "))
        }
        Err(e) => format!("rho_s: unavailable ({e})"),
    }
}

pub fn fit(args: &ModelArgs, ids: &[EstimatorId], opts: &EstimatorOptions) -> CliResult {
    let f = load_and_fit(args)?;
    let names = f.data.covariate_names().to_vec();
    let kernel = f.fit.converged_kernel();
    let estimates = kernel.map(|k| estimate_all(k, ids, opts)).unwrap_or_default();
    let diag = kernel.map(|k| overcorrection_diagnostic(k).map_err(|e| e.to_string()));

    if args.json {
        let estimators: Vec<Value> = estimates
            .iter()
            .map(|est| {
                let k = kernel.expect("estimates imply a converged kernel");
                let coefs: Vec<Value> = (0..k.p())
                    .map(|s| match wald(est, k, s) {
                        Some(w) => json!({
                            "name": names[s], "se": num(w.se), "t": num(w.t), "dof": w.dof,
                            "p_value": num(w.p_value), "ci": [num(w.ci_low), num(w.ci_high)],
                        }),
                        None => json!({"name": names[s], "se": null}),
                    })
                    .collect();
                json!({
                    "id": est.id.tag(),
                    "computable": est.computable,
                    "incomputable_reason": est.incomputable_reason.map(|r| r.to_string()),
                    "coefficients": coefs,
                })
            })
            .collect();
        let diagnostic = match &diag {
            Some(Ok(d)) => json!({
                "rho": d.rho.iter().map(|r| num(*r)).collect::<Vec<_>>(),
                "eigenvalues": d.eigenvalues.iter().map(|r| num(*r)).collect::<Vec<_>>(),
            }),
            Some(Err(e)) => json!({"error": e}),
            None => Value::Null,
        };
        let out = json!({
            "schema_version": JSON_SCHEMA_VERSION,
            "command": "fit",
            "config": config_json(args, &f),
            "fit": fit_json(&f),
            "estimators": estimators,
            "diagnostic": diagnostic,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print_header(args, &f);
        if let Some(k) = kernel {
            for (s, name) in names.iter().enumerate() {
                println!();
                println!("{name} = {:.6}", k.beta()[s]);
                println!(
                    "  {:<5} {:>10} {:>9} {:>4} {:>9}   95% CI",
                    "est", "se", "t", "dof", "p"
                );
                for est in &estimates {
                    match wald(est, k, s) {
                        Some(w) => println!(
                            "  {:<5} {:>10.5} {:>9.3} {:>4} {:>9.4}   [{:.4}, {:.4}]",
                            est.id.tag(),
                            w.se,
                            w.t,
                            w.dof,
                            w.p_value,
                            w.ci_low,
                            w.ci_high
                        ),
                        None => println!(
                            "  {:<5} {:>10}   {}",
                            est.id.tag(),
                            DASH,
                            est.incomputable_reason.map(|r| r.to_string()).unwrap_or_default()
                        ),
                    }
                }
            }
            println!();
            if let Some(d) = &diag {
                println!("{}", rho_line(&names, d));
            }
        }
    }
    if f.fit.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

/// Arm sizes `(N1, N0)` of a binary covariate constant within clusters.
fn arm_sizes(data: &Dataset, column: &str) -> Result<(usize, (usize, usize)), Failure> {
    let idx = data
        .covariate_names()
        .iter()
        .position(|n| n == column)
        .ok_or_else(|| Failure::Input(format!("no covariate named `{column}`")))?;
    let (mut treated, mut control) = (0, 0);
    for c in data.clusters() {
        let x = c.x().column(idx);
        let first = x[0];
        if x.iter().any(|&v| v != first) {
            return Err(Failure::Input(format!("`{column}` varies within cluster `{}`", c.id())));
        }
        if first == 1.0 {
            treated += 1;
        } else if first == 0.0 {
            control += 1;
        } else {
            return Err(Failure::Input(format!("`{column}` is not binary (value {first})")));
        }
    }
    Ok((idx, (treated, control)))
}

pub fn diagnose(args: &ModelArgs, treatment_col: Option<&str>) -> CliResult {
    let f = load_and_fit(args)?;
    let names = f.data.covariate_names().to_vec();
    let arms = treatment_col.map(|c| arm_sizes(&f.data, c)).transpose()?;
    let diag = f
        .fit
        .converged_kernel()
        .map(|k| overcorrection_diagnostic(k).map_err(|e| e.to_string()));
    let benchmark = arms.map(|(idx, (n1, n0))| {
        let n_min = n1.min(n0);
        let value = if n_min >= 2 {
            1.0 / (n_min as f64 - 1.0)
        } else {
            f64::INFINITY
        };
        (idx, n1, n0, value)
    });

    if args.json {
        let diagnostic = match &diag {
            Some(Ok(d)) => json!({
                "rho": names.iter().zip(d.rho.iter()).map(|(n, r)| json!({"name": n, "rho": num(*r)})).collect::<Vec<_>>(),
                "eigenvalues": d.eigenvalues.iter().map(|r| num(*r)).collect::<Vec<_>>(),
                "max_inflation": num(d.max_inflation()),
            }),
            Some(Err(e)) => json!({"error": e}),
            None => Value::Null,
        };
        let bench = benchmark.map(
            |(idx, n1, n0, v)| json!({"column": names[idx], "n_treated": n1, "n_control": n0, "benchmark": num(v)}),
        );
        let mut config = config_json(args, &f);
        config["treatment_col"] = json!(treatment_col);
        let out = json!({
            "schema_version": JSON_SCHEMA_VERSION,
            "command": "diagnose",
            "config": config,
            "fit": fit_json(&f),
            "diagnostic": diagnostic,
            "benchmark": bench,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print_header(args, &f);
        match &diag {
            Some(Ok(d)) => {
                println!();
                let eig: Vec<String> = d.eigenvalues.iter().map(|e| format!("{e:.6}")).collect();
                println!("eigenvalues of I0^-1 B_lev: {}", eig.join(", "));
                println!("max inflation: {:.6}", d.max_inflation());
                println!("{:<16} {:>10}", "coefficient", "rho_s");
                for (n, r) in names.iter().zip(d.rho.iter()) {
                    println!("{n:<16} {r:>10.4}");
                }
                if let Some((idx, n1, n0, value)) = benchmark {
                    let rho = d.rho[idx];
                    let verdict = if (rho - value).abs() <= 1e-6 * value.max(1.0) {
                        "matches"
                    } else {
                        "differs"
                    };
                    println!(
                        "benchmark 1/(N_min - 1) = {value:.2} for `{}` (N1 = {n1}, N0 = {n0}); rho_s = {rho:.4} {verdict}",
                        names[idx]
                    );
                }
            }
            Some(Err(e)) => println!("diagnostic unavailable: {e}"),
            None => {}
        }
    }
    if f.fit.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}
