//! Symmetric quadrature rules on the reference triangle.

use serde::{Deserialize, Serialize};

/// Selects one of the built-in triangle rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureDegree {
    /// 6-point rule, exact for degree 4.
    #[default]
    Four,
    /// 12-point rule, exact for degree 6.
    Six,
}

/// Barycentric points and weights on the reference triangle
/// `{(0,0), (1,0), (0,1)}`. Weights sum to the reference area 1/2.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: u32,
}

impl QuadratureRule {
    pub fn new(degree: QuadratureDegree) -> Self {
        match degree {
            QuadratureDegree::Four => Self::degree4(),
            QuadratureDegree::Six => Self::degree6(),
        }
    }

    pub fn degree4() -> Self {
        let mut rule = QuadratureRule { points: Vec::new(), weights: Vec::new(), degree: 4 };
        rule.push_orbit3(0.445_948_490_915_964_886, 0.223_381_589_678_011_466);
        rule.push_orbit3(0.091_576_213_509_770_743, 0.109_951_743_655_321_868);
        rule
    }

    pub fn degree6() -> Self {
        let mut rule = QuadratureRule { points: Vec::new(), weights: Vec::new(), degree: 6 };
        rule.push_orbit3(0.249_286_745_170_909_983, 0.116_786_275_726_380_079);
        rule.push_orbit3(0.063_089_014_491_502_389, 0.050_844_906_370_207_037);
        rule.push_orbit6(0.310_352_451_033_784_864, 0.053_145_049_844_816_651, 0.082_851_075_618_373_109);
        rule
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Iterates `(barycentric point, weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64; 3], f64)> {
        self.points.iter().zip(self.weights.iter().copied())
    }

    // weights below are relative to unit area and halved on insertion
    fn push_orbit3(&mut self, a: f64, w: f64) {
        let c = 1.0 - 2.0 * a;
        for p in [[a, a, c], [a, c, a], [c, a, a]] {
            self.points.push(p);
            self.weights.push(0.5 * w);
        }
    }

    fn push_orbit6(&mut self, a: f64, b: f64, w: f64) {
        let c = 1.0 - a - b;
        for p in [[a, b, c], [b, a, c], [a, c, b], [c, a, b], [b, c, a], [c, b, a]] {
            self.points.push(p);
            self.weights.push(0.5 * w);
        }
    }
}
