//! JSON helpers shared by the artifact formats.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Serializes an `f64` that may be `+inf` (the "no finite quantile" sentinel).
/// Finite values are written as JSON numbers, infinities as `"inf"` / `"-inf"`.
pub mod extended_f64 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            Err(serde::ser::Error::custom("NaN cannot be serialized"))
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number, \"inf\" or \"-inf\", got {other:?}"
                ))),
            },
        }
    }
}

/// [`extended_f64`] for optional values; `None` is written as `null`.
pub mod opt_extended_f64 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::extended_f64")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct W(#[serde(with = "super::extended_f64")] f64);

    #[test]
    fn infinities_round_trip() {
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.1, -3.5e-12] {
            let s = serde_json::to_string(&W(v)).unwrap();
            assert_eq!(serde_json::from_str::<W>(&s).unwrap(), W(v));
        }
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        assert!(serde_json::to_string(&W(f64::NAN)).is_err());
    }

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct O(#[serde(with = "super::opt_extended_f64")] Option<f64>);

    #[test]
    fn optional_values_round_trip() {
        for v in [None, Some(f64::INFINITY), Some(0.25)] {
            let s = serde_json::to_string(&O(v)).unwrap();
            assert_eq!(serde_json::from_str::<O>(&s).unwrap(), O(v));
        }
    }
}
