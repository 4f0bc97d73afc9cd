use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse-to-fine grid dimensions `(h_k, w_k)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    dims: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(dims: Vec<(usize, usize)>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidSchedule("at least one scale is required".into()));
        }
        if let Some(&(h, w)) = dims.iter().find(|&&(h, w)| h == 0 || w == 0) {
            return Err(Error::InvalidSchedule(format!("empty scale {h}x{w}")));
        }
        for pair in dims.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.0 * a.1 > b.0 * b.1 {
                return Err(Error::InvalidSchedule(format!(
                    "site count decreases from {}x{} to {}x{}",
                    a.0, a.1, b.0, b.1
                )));
            }
        }
        let &(fh, fw) = dims.last().unwrap();
        if let Some(&(h, w)) = dims.iter().find(|&&(h, w)| h > fh || w > fw) {
            return Err(Error::InvalidSchedule(format!(
                "scale {h}x{w} exceeds the finest resolution {fh}x{fw}"
            )));
        }
        Ok(Self { dims })
    }

    /// Parses `"1x1,2x2,4x4"`.
    pub fn parse(text: &str) -> Result<Self> {
        let dims = text
            .split(',')
            .map(|part| {
                let (h, w) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| Error::InvalidSchedule(format!("bad scale '{part}'")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidSchedule(format!("bad scale '{part}'")))
                };
                Ok((parse(h)?, parse(w)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn dims(&self, scale: usize) -> (usize, usize) {
        self.dims[scale]
    }

    pub fn all_dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn sites(&self, scale: usize) -> usize {
        let (h, w) = self.dims[scale];
        h * w
    }

    pub fn finest(&self) -> (usize, usize) {
        *self.dims.last().unwrap()
    }

    /// `sum_{j<scale} h_j w_j`.
    pub fn prefix_sites(&self, scale: usize) -> usize {
        (0..scale).map(|j| self.sites(j)).sum()
    }

    pub fn total_sites(&self) -> usize {
        self.prefix_sites(self.len())
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = Error;

    fn try_from(dims: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(s: ScaleSchedule) -> Self {
        s.dims
    }
}

impl std::fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        f.write_str(&parts.join(","))
    }
}
