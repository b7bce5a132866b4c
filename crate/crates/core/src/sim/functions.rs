//! Benchmark test functions in their canonical (minimization) form.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    Matyas,
    /// Trid in six dimensions.
    Trid,
    Bohachevsky,
    #[serde(alias = "six-hump", alias = "sixhumpcamel")]
    SixHump,
    #[serde(alias = "three-hump", alias = "threehumpcamel")]
    ThreeHump,
}

impl TestFunction {
    pub const ALL: [TestFunction; 5] =
        [TestFunction::Matyas, TestFunction::Trid, TestFunction::Bohachevsky, TestFunction::SixHump, TestFunction::ThreeHump];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Matyas => "matyas",
            TestFunction::Trid => "trid",
            TestFunction::Bohachevsky => "bohachevsky",
            TestFunction::SixHump => "sixhump",
            TestFunction::ThreeHump => "threehump",
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            TestFunction::Trid => 6,
            _ => 2,
        }
    }

    /// Recommended input box, one interval per coordinate.
    pub fn domain(self) -> Vec<(f64, f64)> {
        match self {
            TestFunction::Matyas => vec![(-10.0, 10.0); 2],
            TestFunction::Trid => vec![(-36.0, 36.0); 6],
            TestFunction::Bohachevsky => vec![(-100.0, 100.0); 2],
            TestFunction::SixHump => vec![(-3.0, 3.0), (-2.0, 2.0)],
            TestFunction::ThreeHump => vec![(-5.0, 5.0); 2],
        }
    }

    /// Interacting coordinate pairs; everything else enters additively.
    pub fn interactions(self) -> Vec<(usize, usize)> {
        match self {
            TestFunction::Bohachevsky => vec![],
            TestFunction::Trid => (0..5).map(|i| (i, i + 1)).collect(),
            _ => vec![(0, 1)],
        }
    }

    /// Global minimizers and the minimum value.
    pub fn global_minimum(self) -> (Vec<Vec<f64>>, f64) {
        match self {
            TestFunction::Matyas | TestFunction::Bohachevsky | TestFunction::ThreeHump => (vec![vec![0.0, 0.0]], 0.0),
            TestFunction::Trid => (vec![(1..=6).map(|i| (i * (7 - i)) as f64).collect()], -50.0),
            TestFunction::SixHump => {
                let (a, b) = (0.089_842_007_052_795_6, 0.712_656_403_020_5);
                (vec![vec![a, -b], vec![-a, b]], -1.031_628_453_489_877)
            }
        }
    }

    pub fn eval(self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dimension() {
            return Err(dim(format!("{} takes {} inputs, got {}", self.name(), self.dimension(), x.len())));
        }
        Ok(match self {
            TestFunction::Matyas => 0.26 * (x[0] * x[0] + x[1] * x[1]) - 0.48 * x[0] * x[1],
            TestFunction::Trid => {
                x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() - x.windows(2).map(|w| w[0] * w[1]).sum::<f64>()
            }
            TestFunction::Bohachevsky => {
                x[0] * x[0] + 2.0 * x[1] * x[1] - 0.3 * (3.0 * PI * x[0]).cos() - 0.4 * (4.0 * PI * x[1]).cos() + 0.7
            }
            TestFunction::SixHump => {
                let (a, b) = (x[0], x[1]);
                (4.0 - 2.1 * a * a + a.powi(4) / 3.0) * a * a + a * b + (-4.0 + 4.0 * b * b) * b * b
            }
            TestFunction::ThreeHump => three_hump(x[0], x[1]),
        })
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_', ' '], "");
        match key.as_str() {
            "matyas" => Ok(TestFunction::Matyas),
            "trid" => Ok(TestFunction::Trid),
            "bohachevsky" => Ok(TestFunction::Bohachevsky),
            "sixhump" | "sixhumpcamel" => Ok(TestFunction::SixHump),
            "threehump" | "threehumpcamel" => Ok(TestFunction::ThreeHump),
            _ => Err(Error::UnknownFunction(s.to_string())),
        }
    }
}

/// Evaluate a benchmark by name.
pub fn test_function(name: &str, x: &[f64]) -> Result<f64> {
    name.parse::<TestFunction>()?.eval(x)
}

/// Three-hump camel, `2x² − 1.05x⁴ + x⁶/6 + xy + y²`.
pub fn three_hump(x: f64, y: f64) -> f64 {
    2.0 * x * x - 1.05 * x.powi(4) + x.powi(6) / 6.0 + x * y + y * y
}

pub fn f3(x: f64) -> f64 {
    2.0 * (2.0 * PI * x).sin()
}

pub fn f4(x: f64) -> f64 {
    8.0 * (x - 0.5).powi(2)
}

pub fn f5(x: f64) -> f64 {
    2.0 * (-3.0 * x).exp()
}

/// Local minimizers of the three-hump camel (the global one first).
pub fn three_hump_local_minima() -> [(f64, f64); 3] {
    let (a, b) = (1.747_552_3, -0.873_776_2);
    [(0.0, 0.0), (a, b), (-a, -b)]
}
