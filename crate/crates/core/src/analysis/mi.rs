//! Conditional mutual information on explicit discrete tables over
//! `(o, z, a, t)`: output token, visual input, inference state, context.

use std::fmt::Write as _;

use rand_distr::{Dirichlet, Distribution};

use crate::error::{Result, VifError};
use crate::tensor::Rng;

pub const MAX_SUPPORT: usize = 6;
pub const TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    /// Support sizes of `(o, z, a, t)`.
    pub dims: [usize; 4],
    /// Row-major probabilities, `t` fastest.
    pub p: Vec<f64>,
}

impl Joint {
    pub fn new(dims: [usize; 4], p: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d > MAX_SUPPORT) {
            return Err(VifError::invalid(format!("supports must lie in 1..={MAX_SUPPORT}, got {dims:?}")));
        }
        if p.len() != dims.iter().product::<usize>() {
            return Err(VifError::invalid(format!("{} probabilities for supports {dims:?}", p.len())));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(VifError::invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > TOLERANCE {
            return Err(VifError::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Joint { dims, p })
    }

    pub fn at(&self, o: usize, z: usize, a: usize, t: usize) -> f64 {
        let [_, dz, da, dt] = self.dims;
        self.p[((o * dz + z) * da + a) * dt + t]
    }

    /// Product of independent marginals.
    pub fn independent(po: &[f64], pz: &[f64], pa: &[f64], pt: &[f64]) -> Result<Self> {
        let mut p = Vec::with_capacity(po.len() * pz.len() * pa.len() * pt.len());
        for &x in po {
            for &y in pz {
                for &w in pa {
                    for &v in pt {
                        p.push(x * y * w * v);
                    }
                }
            }
        }
        Joint::new([po.len(), pz.len(), pa.len(), pt.len()], normalize(p))
    }
}

fn normalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Which variables each side of a conditional MI groups together.
#[derive(Clone, Copy)]
enum Group {
    Z,
    A,
    ZA,
    T,
    ZT,
}

impl Group {
    /// Flat index of this group's value and its cardinality.
    fn key(self, dims: &[usize; 4], z: usize, a: usize, t: usize) -> (usize, usize) {
        let [_, dz, da, dt] = *dims;
        match self {
            Group::Z => (z, dz),
            Group::A => (a, da),
            Group::ZA => (z * da + a, dz * da),
            Group::T => (t, dt),
            Group::ZT => (z * dt + t, dz * dt),
        }
    }
}

/// `I(o; X | C)` in bits by summing
/// `p(o,x,c) log2[ p(o,x,c) p(c) / (p(o,c) p(x,c)) ]` over the support.
fn conditional_mi(j: &Joint, x: Group, c: Group) -> f64 {
    let d = &j.dims;
    let (_, nx) = x.key(d, 0, 0, 0);
    let (_, nc) = c.key(d, 0, 0, 0);
    let no = d[0];
    let mut p_oxc = vec![0.0; no * nx * nc];
    for o in 0..no {
        for z in 0..d[1] {
            for a in 0..d[2] {
                for t in 0..d[3] {
                    let (xi, _) = x.key(d, z, a, t);
                    let (ci, _) = c.key(d, z, a, t);
                    p_oxc[(o * nx + xi) * nc + ci] += j.at(o, z, a, t);
                }
            }
        }
    }
    let mut p_c = vec![0.0; nc];
    let mut p_oc = vec![0.0; no * nc];
    let mut p_xc = vec![0.0; nx * nc];
    for o in 0..no {
        for xi in 0..nx {
            for ci in 0..nc {
                let v = p_oxc[(o * nx + xi) * nc + ci];
                p_c[ci] += v;
                p_oc[o * nc + ci] += v;
                p_xc[xi * nc + ci] += v;
            }
        }
    }
    let mut mi = 0.0;
    for o in 0..no {
        for xi in 0..nx {
            for ci in 0..nc {
                let v = p_oxc[(o * nx + xi) * nc + ci];
                if v > 0.0 {
                    mi += v * (v * p_c[ci] / (p_oc[o * nc + ci] * p_xc[xi * nc + ci])).log2();
                }
            }
        }
    }
    mi
}

#[derive(Clone, Debug, PartialEq)]
pub struct MICheckReport {
    pub dims: [usize; 4],
    pub label: String,
    /// `I(o; z | t)`
    pub i_oz_t: f64,
    /// `I(o; a | z, t)`
    pub i_oa_zt: f64,
    /// `I(o; z, a | t)`
    pub i_oza_t: f64,
    /// `I(o; z,a | t) - I(o; z | t) - I(o; a | z,t)`
    pub residual: f64,
    /// `I(o; z,a | t) - I(o; z | t)`
    pub margin: f64,
}

impl MICheckReport {
    pub fn passed(&self) -> bool {
        self.residual.abs() <= TOLERANCE
            && self.margin >= -TOLERANCE
            && [self.i_oz_t, self.i_oa_zt, self.i_oza_t].iter().all(|&v| v >= -TOLERANCE)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "joint = {}", self.label).unwrap();
        writeln!(out, "dims = {}x{}x{}x{}", self.dims[0], self.dims[1], self.dims[2], self.dims[3]).unwrap();
        writeln!(out, "i_o_z_given_t = {:.17e}", self.i_oz_t).unwrap();
        writeln!(out, "i_o_a_given_z_t = {:.17e}", self.i_oa_zt).unwrap();
        writeln!(out, "i_o_za_given_t = {:.17e}", self.i_oza_t).unwrap();
        writeln!(out, "chain_rule_residual = {:.3e}", self.residual).unwrap();
        writeln!(out, "inequality_margin = {:.17e}", self.margin).unwrap();
        writeln!(out, "pass = {}", self.passed()).unwrap();
        out
    }
}

/// Chain rule and monotonicity check: adding the inference state to the
/// visual conditioning set never lowers the information about the output.
pub fn mi_check(joint: &Joint, label: &str) -> MICheckReport {
    let i_oz_t = conditional_mi(joint, Group::Z, Group::T);
    let i_oa_zt = conditional_mi(joint, Group::A, Group::ZT);
    let i_oza_t = conditional_mi(joint, Group::ZA, Group::T);
    MICheckReport {
        dims: joint.dims,
        label: label.to_string(),
        i_oz_t,
        i_oa_zt,
        i_oza_t,
        residual: i_oza_t - i_oz_t - i_oa_zt,
        margin: i_oza_t - i_oz_t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointKind {
    /// Flat Dirichlet(1) over every cell.
    Dirichlet,
    /// Dirichlet(0.1): most mass on few cells.
    Sparse,
    /// `o` a deterministic function of `(z, a)` under a random `(z, a, t)`;
    /// many exact zeros.
    Functional,
}

const KINDS: [JointKind; 3] = [JointKind::Dirichlet, JointKind::Sparse, JointKind::Functional];

pub fn random_joint(rng: &mut Rng, kind: JointKind) -> Result<Joint> {
    let dims = [2 + rng.below(5), 2 + rng.below(5), 2 + rng.below(5), 1 + rng.below(6)];
    let cells: usize = dims.iter().product();
    let draw = |n: usize, alpha: f64, rng: &mut Rng| -> Result<Vec<f64>> {
        let d = Dirichlet::new(&vec![alpha; n]).map_err(|e| VifError::invalid(e.to_string()))?;
        Ok(d.sample(rng.inner_mut()))
    };
    let p = match kind {
        JointKind::Dirichlet => draw(cells, 1.0, rng)?,
        JointKind::Sparse => draw(cells, 0.1, rng)?,
        JointKind::Functional => {
            let [no, dz, da, dt] = dims;
            let q = draw(dz * da * dt, 1.0, rng)?;
            let f: Vec<usize> = (0..dz * da).map(|_| rng.below(no)).collect();
            let mut p = vec![0.0; cells];
            for z in 0..dz {
                for a in 0..da {
                    for t in 0..dt {
                        let o = f[z * da + a];
                        p[((o * dz + z) * da + a) * dt + t] = q[(z * da + a) * dt + t];
                    }
                }
            }
            p
        }
    };
    Joint::new(dims, normalize(p))
}

/// `trials` random joints cycling through the generator kinds.
pub fn random_trials(trials: usize, seed: u64) -> Result<Vec<MICheckReport>> {
    let mut rng = Rng::new(seed).fork("mi");
    (0..trials)
        .map(|i| {
            let kind = KINDS[i % KINDS.len()];
            let j = random_joint(&mut rng, kind)?;
            Ok(mi_check(&j, &format!("{kind:?}#{i}").to_lowercase()))
        })
        .collect()
}
