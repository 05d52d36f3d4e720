//! Matrices as nested JSON row arrays.

use ndarray::Array2;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
    if rows.is_empty() {
        // Keep the column count of empty matrices.
        return (0usize, m.ncols()).serialize(s);
    }
    rows.serialize(s)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Rows(Vec<Vec<f64>>),
    Empty(usize, usize),
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
    match Repr::deserialize(d)? {
        Repr::Empty(rows, cols) => Array2::from_shape_vec((rows, cols), vec![0.0; rows * cols]).map_err(D::Error::custom),
        Repr::Rows(rows) => {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(D::Error::custom("ragged matrix rows"));
            }
            let n = rows.len();
            Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(D::Error::custom)
        }
    }
}
