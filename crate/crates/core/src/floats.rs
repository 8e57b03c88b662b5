//! Serde adapters that keep non-finite floats representable in JSON
//! (`"inf"`, `"-inf"`, `"nan"`), and the float formatting used in CSV output.

use serde::{Deserialize, Deserializer, Serializer};

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

fn decode(r: Repr) -> Result<f64, String> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Text(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(format!("expected a number, found `{other}`")),
        },
    }
}

fn text(v: f64) -> &'static str {
    if v.is_nan() {
        "nan"
    } else if v > 0.0 {
        "inf"
    } else {
        "-inf"
    }
}

/// Shortest round-trip decimal form; `inf`, `-inf`, `nan` otherwise.
pub fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        text(v).to_string()
    }
}

pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(text(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

pub mod vector {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            if x.is_finite() {
                seq.serialize_element(x)?;
            } else {
                seq.serialize_element(text(*x))?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| decode(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    struct Probe {
        #[serde(with = "super::scalar")]
        a: f64,
        #[serde(with = "super::vector")]
        b: Vec<f64>,
    }

    #[test]
    fn non_finite_round_trip() {
        let p = Probe { a: f64::INFINITY, b: vec![1.5, f64::NAN, f64::NEG_INFINITY] };
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"a":"inf","b":[1.5,"nan","-inf"]}"#);
        let back: Probe = serde_json::from_str(&text).unwrap();
        assert_eq!(back.a, f64::INFINITY);
        assert!(back.b[1].is_nan());
        assert_eq!(super::fmt(0.1), "0.1");
        assert_eq!(super::fmt(f64::INFINITY), "inf");
    }
}
