//! Grid-recall task: the model sees a `K x K` grid of symbols and must emit
//! every cell's symbol in row-major order, then EOS. The token needed at
//! step `t` is always cell `t`, so the visual demand is the same at every
//! depth of the generation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, VifError};
use crate::tensor::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Task marker placed after BOS in every prompt.
pub const RECALL: usize = 3;
pub const N_SPECIALS: usize = 4;

/// Token id of grid symbol `s`.
pub fn symbol_token(s: usize) -> usize {
    N_SPECIALS + s
}

/// Inverse of [`symbol_token`] for non-special ids.
pub fn token_symbol(tok: usize) -> Option<usize> {
    tok.checked_sub(N_SPECIALS)
}

pub fn vocab_size_for(n_symbols: usize) -> usize {
    N_SPECIALS + n_symbols
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridImage {
    pub side: usize,
    pub cells: Vec<usize>,
}

impl GridImage {
    pub fn new(side: usize, cells: Vec<usize>, n_symbols: usize) -> Result<Self> {
        if side == 0 || cells.len() != side * side {
            return Err(VifError::invalid(format!(
                "grid of side {side} needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= n_symbols) {
            return Err(VifError::invalid(format!("symbol id {bad} outside alphabet of {n_symbols}")));
        }
        Ok(GridImage { side, cells })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSample {
    pub image: GridImage,
    pub prompt: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TaskSample {
    pub fn new(image: GridImage) -> Self {
        let mut targets: Vec<usize> = image.cells.iter().map(|&c| symbol_token(c)).collect();
        targets.push(EOS);
        TaskSample { image, prompt: vec![BOS, RECALL], targets }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub side: usize,
    pub n_symbols: usize,
    pub n_samples: usize,
}

/// Cells are drawn i.i.d. uniform over the alphabet.
pub fn gen_dataset(spec: &TaskSpec, vocab_size: usize, seed: u64) -> Result<Vec<TaskSample>> {
    if spec.n_symbols < 2 {
        return Err(VifError::invalid("the alphabet needs at least 2 symbols"));
    }
    if spec.side < 1 {
        return Err(VifError::invalid("grid side must be at least 1"));
    }
    if vocab_size < vocab_size_for(spec.n_symbols) {
        return Err(VifError::invalid(format!(
            "vocabulary of {vocab_size} cannot hold {} symbols plus {N_SPECIALS} specials",
            spec.n_symbols
        )));
    }
    let mut rng = Rng::new(seed).fork("synthgrid");
    let n_cells = spec.side * spec.side;
    Ok((0..spec.n_samples)
        .map(|_| {
            let cells = (0..n_cells).map(|_| rng.below(spec.n_symbols)).collect();
            TaskSample::new(GridImage { side: spec.side, cells })
        })
        .collect())
}

/// Fraction of samples whose generated token at position `t` equals the
/// target cell symbol, for every cell position `t`. Generations that stopped
/// early count as wrong at the missing positions.
pub fn per_position_accuracy(generated: &[Vec<usize>], samples: &[TaskSample]) -> Result<Vec<f64>> {
    if generated.len() != samples.len() || samples.is_empty() {
        return Err(VifError::invalid(format!(
            "{} generations for {} samples",
            generated.len(),
            samples.len()
        )));
    }
    let n_cells = samples[0].image.n_cells();
    if samples.iter().any(|s| s.image.n_cells() != n_cells) {
        return Err(VifError::invalid("samples mix grid sizes"));
    }
    let mut hits = vec![0usize; n_cells];
    for (gen, sample) in generated.iter().zip(samples) {
        for (t, hit) in hits.iter_mut().enumerate() {
            if gen.get(t) == Some(&sample.targets[t]) {
                *hit += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / samples.len() as f64).collect())
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// One sample per line: `K;S;cells;prompt;targets`, lists comma-separated.
/// Lines starting with `#` are comments.
pub fn write_dataset(path: &Path, samples: &[TaskSample], n_symbols: usize, seed: u64) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# grid-recall dataset v1 seed={seed}").unwrap();
    writeln!(out, "# K;S;cells;prompt;targets").unwrap();
    for s in samples {
        writeln!(
            out,
            "{};{};{};{};{}",
            s.image.side,
            n_symbols,
            join(&s.image.cells),
            join(&s.prompt),
            join(&s.targets)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskSample>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn parse_dataset(text: &str) -> Result<Vec<TaskSample>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| VifError::Dataset { line: i + 1, detail };
        let fields: Vec<&str> = line.split(';').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.trim().parse::<usize>().map_err(|e| err(format!("`{s}`: {e}")));
        let list = |s: &str| s.split(',').map(num).collect::<Result<Vec<_>>>();
        let side = num(fields[0])?;
        let n_symbols = num(fields[1])?;
        let image = GridImage::new(side, list(fields[2])?, n_symbols).map_err(|e| err(e.to_string()))?;
        let sample = TaskSample { image, prompt: list(fields[3])?, targets: list(fields[4])? };
        if sample.targets.len() != side * side + 1 {
            return Err(err(format!("{} targets for {} cells", sample.targets.len(), side * side)));
        }
        if sample != TaskSample::new(sample.image.clone()) {
            return Err(err("prompt/targets inconsistent with the grid".into()));
        }
        samples.push(sample);
    }
    Ok(samples)
}
