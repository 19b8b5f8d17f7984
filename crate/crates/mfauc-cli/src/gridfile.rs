//! Grid files: a flat `key = [values]` table, one key per line.
//!
//! Recognised keys: `alpha`, `lambda`, `k` (numeric lists), `loss`,
//! `weight` (quoted name lists), `beta`, `rho` (numeric lists expanded
//! against the loss/weight names). Lines starting with `#` are comments.

use anyhow::{anyhow, bail, Result};
use mfauc_core::losses::{LossKind, LossSpec, WeightSpec};
use mfauc_core::tuning::Grid;

fn parse_list(raw: &str, key: &str) -> Result<Vec<String>> {
    let trimmed = raw.trim();
    let inner = trimmed
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| anyhow!("grid key `{key}`: expected a [list], got `{raw}`"))?;
    Ok(inner
        .split(',')
        .map(|t| t.trim().trim_matches('"').trim_matches('\'').to_string())
        .filter(|t| !t.is_empty())
        .collect())
}

fn parse_floats(raw: &str, key: &str) -> Result<Vec<f64>> {
    parse_list(raw, key)?
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| anyhow!("grid key `{key}`: bad number `{t}`"))
        })
        .collect()
}

/// Parses the grid file and expands loss/beta and weight/rho lists into
/// concrete candidates.
pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut alphas = Vec::new();
    let mut lambdas = Vec::new();
    let mut ks = Vec::new();
    let mut loss_names: Vec<String> = Vec::new();
    let mut weight_names: Vec<String> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut rhos: Vec<f64> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("grid line {}: expected `key = [..]`", lineno + 1))?;
        let key = key.trim();
        match key {
            "alpha" => alphas = parse_floats(value, key)?,
            "lambda" => lambdas = parse_floats(value, key)?,
            "k" => {
                ks = parse_list(value, key)?
                    .iter()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| anyhow!("grid key `k`: bad integer `{t}`"))
                    })
                    .collect::<Result<_>>()?
            }
            "loss" => loss_names = parse_list(value, key)?,
            "weight" => weight_names = parse_list(value, key)?,
            "beta" => betas = parse_floats(value, key)?,
            "rho" => rhos = parse_floats(value, key)?,
            other => bail!("grid line {}: unknown key `{other}`", lineno + 1),
        }
    }
    if alphas.is_empty() || lambdas.is_empty() || ks.is_empty() {
        bail!("grid file must list alpha, lambda and k candidates");
    }

    let mut grid = Grid::new(alphas, lambdas, ks);
    if !loss_names.is_empty() {
        let betas = if betas.is_empty() { vec![1.0] } else { betas };
        let mut losses = Vec::new();
        for name in &loss_names {
            let kind = LossKind::parse(name)?;
            match kind {
                LossKind::Sigmoid | LossKind::Logistic => {
                    for &b in &betas {
                        losses.push(LossSpec::new(kind, b)?);
                    }
                }
                _ => losses.push(LossSpec::new(kind, 1.0)?),
            }
        }
        grid.losses = losses;
    }
    if !weight_names.is_empty() {
        let rhos = if rhos.is_empty() { vec![1.0] } else { rhos };
        let mut weights = Vec::new();
        for name in &weight_names {
            match name.as_str() {
                "identity" => weights.push(WeightSpec::identity()),
                "tanh" => {
                    for &r in &rhos {
                        weights.push(WeightSpec::tanh(r)?);
                    }
                }
                other => bail!("unknown weight `{other}` in grid"),
            }
        }
        grid.weights = weights;
    }
    Ok(grid)
}

/// Renders the selected configuration as a flat key = value table.
pub fn render_best(cfg: &mfauc_core::TrainConfig, cv_f1: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("alpha = {}\n", cfg.alpha));
    out.push_str(&format!("lambda = {}\n", cfg.lambda));
    out.push_str(&format!("k = {}\n", cfg.k));
    out.push_str(&format!("loss = \"{}\"\n", cfg.loss.kind().name()));
    out.push_str(&format!("beta = {}\n", cfg.loss.beta()));
    out.push_str(&format!("weight = \"{}\"\n", cfg.weight.name()));
    out.push_str(&format!("rho = {}\n", cfg.weight.rho()));
    out.push_str(&format!("cv_f1 = {cv_f1}\n"));
    out
}
