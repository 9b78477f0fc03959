use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    /// Minimax concave penalty: flat beyond `mcp_c · lambda`.
    Mcp,
}

/// Penalty applied to each coordinate of each pairwise coefficient
/// difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub mcp_c: f64,
}

impl PenaltySpec {
    pub fn l1(lambda: f64) -> Self {
        Self { kind: PenaltyKind::L1, lambda, mcp_c: 3.0 }
    }

    pub fn mcp(lambda: f64, c: f64) -> Self {
        Self { kind: PenaltyKind::Mcp, lambda, mcp_c: c }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    /// Penalty of a single coordinate `t`.
    pub fn value(&self, t: f64) -> f64 {
        let t = t.abs();
        match self.kind {
            PenaltyKind::L1 => self.lambda * t,
            PenaltyKind::Mcp => {
                let knot = self.mcp_c * self.lambda;
                if t <= knot {
                    self.lambda * t - t * t / (2.0 * self.mcp_c)
                } else {
                    0.5 * self.mcp_c * self.lambda * self.lambda
                }
            }
        }
    }

    /// `argmin_x (rho / 2)(x - z)^2 + value(x)`.
    pub fn prox(&self, z: f64, rho: f64) -> f64 {
        let threshold = self.lambda / rho;
        match self.kind {
            PenaltyKind::L1 => soft_threshold(z, threshold),
            PenaltyKind::Mcp => {
                if self.lambda == 0.0 {
                    return z;
                }
                let knot = self.mcp_c * self.lambda;
                let s = z.signum();
                let objective = |x: f64| 0.5 * rho * (x - z) * (x - z) + self.value(x);
                // Candidates: zero, the flat region's minimizer, and the
                // stationary point (or endpoints) of the concave-quadratic region.
                let mut candidates = [0.0, s * z.abs().max(knot), s * knot];
                let curvature = rho - 1.0 / self.mcp_c;
                if curvature > 0.0 {
                    let stationary = (rho * z.abs() - self.lambda) / curvature;
                    candidates[2] = s * stationary.clamp(0.0, knot);
                }
                candidates
                    .into_iter()
                    .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
                    .unwrap_or(0.0)
            }
        }
    }
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}
