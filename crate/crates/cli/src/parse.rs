//! Parsers for the compact command-line specs.

use anyhow::{anyhow, bail, Context, Result};
use vgpds::optimizer::ParamGroup;
use vgpds::TemporalKernel;

/// Parses a kernel either as JSON (leading `{`) or as `+`-joined components
/// `family[:p1[:p2[:p3]]]`, e.g. `rbf:1:10+white:0.01`. Omitted parameters default to 1.
pub fn kernel(spec: &str) -> Result<TemporalKernel> {
    let spec = spec.trim();
    if spec.starts_with('{') {
        return Ok(TemporalKernel::from_json(spec)?);
    }
    let mut parts = Vec::new();
    for comp in spec.split('+') {
        let mut fields = comp.trim().split(':');
        let family = fields.next().unwrap_or("").to_ascii_lowercase();
        let nums: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>().with_context(|| format!("bad number '{f}' in kernel component '{comp}'")))
            .collect::<Result<_>>()?;
        let p = |i: usize| nums.get(i).copied().unwrap_or(1.0);
        let max = match family.as_str() {
            "rbf" | "matern32" => 2,
            "periodic" => 3,
            "white" | "bias" => 1,
            other => bail!("unknown kernel family '{other}'"),
        };
        if nums.len() > max {
            bail!("kernel component '{comp}' takes at most {max} parameters");
        }
        parts.push(match family.as_str() {
            "rbf" => TemporalKernel::rbf(p(0), p(1)),
            "matern32" => TemporalKernel::matern32(p(0), p(1)),
            "periodic" => TemporalKernel::periodic(p(0), p(1), p(2)),
            "white" => TemporalKernel::white(p(0)),
            _ => TemporalKernel::bias(p(0)),
        });
    }
    let k = if parts.len() == 1 { parts.pop().unwrap() } else { TemporalKernel::sum(parts) };
    k.validate()?;
    Ok(k)
}

/// Column selection: comma-separated zero-based indices, inclusive ranges `a-b`,
/// or column names. Returns sorted, distinct indices.
pub fn columns(spec: &str, names: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(j) = names.iter().position(|n| n == item) {
            out.push(j);
        } else if let Some((a, b)) = item.split_once('-') {
            let a: usize = a.trim().parse().with_context(|| format!("bad column range '{item}'"))?;
            let b: usize = b.trim().parse().with_context(|| format!("bad column range '{item}'"))?;
            if a > b {
                bail!("empty column range '{item}'");
            }
            out.extend(a..=b);
        } else {
            out.push(item.parse().map_err(|_| anyhow!("unknown column '{item}'"))?);
        }
    }
    if let Some(j) = out.iter().find(|&&j| j >= names.len()) {
        bail!("column {j} out of range for {} columns", names.len());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn groups(spec: &str) -> Result<Vec<ParamGroup>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<ParamGroup>().map_err(|e| anyhow!("{e}")))
        .collect()
}

pub fn numbers<T: std::str::FromStr>(spec: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("bad number '{s}': {e}")))
        .collect()
}
