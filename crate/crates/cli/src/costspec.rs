//! The `--cost` grammar.

use std::fmt;
use std::str::FromStr;

use enerflow::Objective;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostSpec {
    Plain(Objective),
    /// Least energy with modeled time at most the bound (ms).
    Constrained {
        time_le: f64,
    },
}

impl CostSpec {
    /// Weighted objectives are scored against the origin graph's best time
    /// and energy; the raw metrics are not.
    pub fn normalized(&self) -> bool {
        match self {
            CostSpec::Plain(o) => {
                matches!(o, Objective::Linear { .. } | Objective::Product { .. } | Objective::Mix { .. })
            }
            CostSpec::Constrained { .. } => true,
        }
    }

    /// Radius used when `--d` is not given: 1 where per-node moves suffice,
    /// 2 otherwise.
    pub fn default_d(&self) -> usize {
        match self {
            CostSpec::Plain(Objective::Time | Objective::Energy | Objective::Linear { .. })
            | CostSpec::Constrained { .. } => 1,
            CostSpec::Plain(_) => 2,
        }
    }
}

impl fmt::Display for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostSpec::Plain(o) => write!(f, "{o}"),
            CostSpec::Constrained { time_le } => write!(f, "constrained:time<={time_le}"),
        }
    }
}

fn number(s: &str, what: &str) -> Result<f64, String> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("invalid {what} `{s}`"))
}

fn weight(s: &str) -> Result<f64, String> {
    let w = number(s, "weight")?;
    if (0.0..=1.0).contains(&w) {
        Ok(w)
    } else {
        Err(format!("weight {w} outside [0, 1]"))
    }
}

impl FromStr for CostSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let plain = |o| Ok(CostSpec::Plain(o));
        match s {
            "time" => return plain(Objective::Time),
            "energy" => return plain(Objective::Energy),
            "power" => return plain(Objective::Power),
            _ => {}
        }
        if let Some(w) = s.strip_prefix("linear:w=") {
            return plain(Objective::Linear { w: weight(w)? });
        }
        if let Some(w) = s.strip_prefix("product:w=") {
            return plain(Objective::Product { w: weight(w)? });
        }
        if let Some(b) = s.strip_prefix("constrained:time<=") {
            let time_le = number(b, "time bound")?;
            if time_le <= 0.0 {
                return Err("time bound must be positive".into());
            }
            return Ok(CostSpec::Constrained { time_le });
        }
        if let Some(rest) = s.strip_prefix("mix:") {
            let (mut time, mut energy, mut power) = (0.0, 0.0, 0.0);
            for part in rest.split(',') {
                let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value in `{part}`"))?;
                let v = number(v, "mix weight")?;
                if v < 0.0 {
                    return Err(format!("negative mix weight for {k}"));
                }
                match k.trim() {
                    "time" => time = v,
                    "energy" => energy = v,
                    "power" => power = v,
                    other => return Err(format!("unknown mix metric `{other}`")),
                }
            }
            if time + energy + power <= 0.0 {
                return Err("mix weights are all zero".into());
            }
            return plain(Objective::Mix { time, energy, power });
        }
        Err(format!(
            "unknown cost `{s}` (expected time, energy, power, linear:w=F, product:w=F, \
             mix:time=F,energy=F,power=F or constrained:time<=F)"
        ))
    }
}
