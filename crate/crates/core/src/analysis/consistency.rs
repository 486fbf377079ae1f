use std::fmt::Write as _;

use super::savgol::{fit_window, savgol};
use crate::error::{Result, VifError};
use crate::model::{visual_tokens, DecodingTrace, ModelParams};

/// Which vector stands in for a generated token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRepr {
    /// Row of the input embedding table.
    InputEmbedding,
    /// Column of the output projection for that token.
    OutputEmbedding,
}

impl TokenRepr {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(TokenRepr::InputEmbedding),
            "output" => Ok(TokenRepr::OutputEmbedding),
            other => Err(VifError::invalid(format!("unknown token representation `{other}` (input | output)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenRepr::InputEmbedding => "input",
            TokenRepr::OutputEmbedding => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub position: usize,
    pub n: usize,
    pub cos_mean: f64,
    pub l2_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyCurve {
    pub points: Vec<CurvePoint>,
    pub cos_smooth: Vec<f64>,
    pub l2_smooth: Vec<f64>,
    /// Free-form `key=value` pairs written into the CSV header.
    pub meta: Vec<(String, String)>,
}

/// Per-sample statistics of one token vector against the visual tokens:
/// mean cosine and mean Euclidean distance.
pub fn token_stats(e: &[f64], visual: &[&[f64]]) -> (f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ne = norm(e);
    let mut cos = 0.0;
    let mut l2 = 0.0;
    for z in visual {
        let dot: f64 = e.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let denom = ne * norm(z);
        // A zero vector has no direction; count it as orthogonal.
        if denom > 0.0 {
            cos += (dot / denom).clamp(-1.0, 1.0);
        }
        l2 += e.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    (cos / visual.len() as f64, l2 / visual.len() as f64)
}

/// Image–text consistency by generation position. Each generated token
/// before EOS is compared with every visual token of its image; positions
/// are aggregated across traces.
pub fn consistency_curve(
    traces: &[DecodingTrace],
    params: &ModelParams,
    repr: TokenRepr,
    window: usize,
    polyorder: usize,
) -> Result<ConsistencyCurve> {
    if traces.is_empty() {
        return Err(VifError::invalid("consistency curve of an empty trace set"));
    }
    let vocab = params.config.vocab_size;
    let mut sums: Vec<(usize, f64, f64)> = Vec::new();
    for tr in traces {
        let z_v = visual_tokens(&tr.image, params)?;
        let rows: Vec<&[f64]> = (0..z_v.rows()).map(|i| z_v.row(i)).collect();
        for (l, &tok) in tr.content_tokens().iter().enumerate() {
            if tok >= vocab {
                return Err(VifError::invalid(format!("trace token {tok} outside vocabulary")));
            }
            let e: Vec<f64> = match repr {
                TokenRepr::InputEmbedding => params.tok_embed.row(tok).to_vec(),
                TokenRepr::OutputEmbedding => (0..params.w_o.rows()).map(|r| params.w_o.at(r, tok)).collect(),
            };
            let (c, d) = token_stats(&e, &rows);
            if sums.len() <= l {
                sums.resize(l + 1, (0, 0.0, 0.0));
            }
            sums[l].0 += 1;
            sums[l].1 += c;
            sums[l].2 += d;
        }
    }
    let points: Vec<CurvePoint> = sums
        .into_iter()
        .enumerate()
        .map(|(position, (n, c, d))| CurvePoint { position, n, cos_mean: c / n as f64, l2_mean: d / n as f64 })
        .collect();
    let cos: Vec<f64> = points.iter().map(|p| p.cos_mean).collect();
    let l2: Vec<f64> = points.iter().map(|p| p.l2_mean).collect();
    let (cos_smooth, l2_smooth) = match fit_window(points.len(), window, polyorder) {
        Some((w, o)) => (savgol(&cos, w, o)?, savgol(&l2, w, o)?),
        None => (Vec::new(), Vec::new()),
    };
    Ok(ConsistencyCurve { points, cos_smooth, l2_smooth, meta: vec![("repr".into(), repr.as_str().into())] })
}

impl ConsistencyCurve {
    pub fn cos_means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.cos_mean).collect()
    }

    pub fn l2_means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.l2_mean).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.n).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.meta.is_empty() {
            let kv: Vec<String> = self.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(out, "# {}", kv.join(" ")).unwrap();
        }
        out.push_str("position,n,cos_mean,cos_smooth,l2_mean,l2_smooth\n");
        for (i, p) in self.points.iter().enumerate() {
            writeln!(
                out,
                "{},{},{:.9},{:.9},{:.9},{:.9}",
                p.position, p.n, p.cos_mean, self.cos_smooth[i], p.l2_mean, self.l2_smooth[i]
            )
            .unwrap();
        }
        out
    }
}

/// Count-weighted least-squares slope of `values` against position.
pub fn weighted_slope(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(VifError::shape("weighted_slope", format!("{} values, {} weights", values.len(), weights.len())));
    }
    if values.len() < 2 {
        return Err(VifError::invalid("a slope needs at least two positions"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(VifError::invalid("slope weights must be non-negative"));
    }
    let sw: f64 = weights.iter().sum();
    let mx = weights.iter().enumerate().map(|(i, w)| w * i as f64).sum::<f64>() / sw;
    let my = weights.iter().zip(values).map(|(w, y)| w * y).sum::<f64>() / sw;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, (w, y)) in weights.iter().zip(values).enumerate() {
        let dx = i as f64 - mx;
        sxy += w * dx * (y - my);
        sxx += w * dx * dx;
    }
    if !(sxx > 0.0) {
        return Err(VifError::invalid("slope undefined: weight sits on a single position"));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecaySlope {
    pub cos: f64,
    pub cos_smooth: f64,
    pub l2: f64,
    pub l2_smooth: f64,
}

pub fn decay_slope(curve: &ConsistencyCurve) -> Result<DecaySlope> {
    let w: Vec<f64> = curve.points.iter().map(|p| p.n as f64).collect();
    Ok(DecaySlope {
        cos: weighted_slope(&curve.cos_means(), &w)?,
        cos_smooth: weighted_slope(&curve.cos_smooth, &w)?,
        l2: weighted_slope(&curve.l2_means(), &w)?,
        l2_smooth: weighted_slope(&curve.l2_smooth, &w)?,
    })
}
