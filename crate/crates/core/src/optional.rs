//! Serde adapter for optional settings whose default is `Some`: `None` is
//! written as the string `"off"` so it survives formats without a null.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const OFF: &str = "off";

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr<T> {
    Value(T),
    Word(String),
}

pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => x.serialize(s),
        None => s.serialize_str(OFF),
    }
}

pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
    match Repr::<T>::deserialize(d)? {
        Repr::Value(x) => Ok(Some(x)),
        Repr::Word(w) if w == OFF => Ok(None),
        Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a number or \"{OFF}\", got \"{w}\""))),
    }
}
