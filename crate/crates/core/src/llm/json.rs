use serde_json::Value;

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsonShape {
    ArrayOfStrings,
    ArrayOfObjects,
    Object,
}

impl JsonShape {
    fn opener(self) -> u8 {
        match self {
            JsonShape::Object => b'{',
            _ => b'[',
        }
    }

    fn matches(self, v: &Value) -> bool {
        match (self, v) {
            (JsonShape::ArrayOfStrings, Value::Array(a)) => a.iter().all(Value::is_string),
            (JsonShape::ArrayOfObjects, Value::Array(a)) => a.iter().all(Value::is_object),
            (JsonShape::Object, Value::Object(_)) => true,
            _ => false,
        }
    }
}

/// Finds the first complete JSON value of the expected shape inside free-form
/// model output. Code fences and surrounding prose are skipped implicitly:
/// each candidate opening bracket is tried in turn with a streaming parser
/// that stops at the end of the first value.
pub fn extract_json(text: &str, shape: JsonShape) -> Result<Value, LlmError> {
    let opener = shape.opener();
    for (pos, b) in text.bytes().enumerate() {
        if b != opener {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if shape.matches(&v) {
                return Ok(v);
            }
        }
    }
    let preview: String = text.chars().take(120).collect();
    Err(LlmError::MalformedOutput(format!("no {shape:?} JSON value in output: {preview:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn strips_fences() {
        let v = extract_json("```json\n[\"a\",\"b\"]\n```", JsonShape::ArrayOfStrings).unwrap();
        assert_eq!(v, json!(["a", "b"]));
    }

    #[test]
    fn strips_prose() {
        let v = extract_json("Sure! {\"0\": {\"f\": 0.5}}", JsonShape::Object).unwrap();
        assert_eq!(v, json!({"0": {"f": 0.5}}));
    }

    #[test]
    fn rejects_missing_json() {
        assert!(matches!(
            extract_json("no json here", JsonShape::Object),
            Err(LlmError::MalformedOutput(_))
        ));
    }

    #[test]
    fn skips_values_of_the_wrong_shape() {
        let text = "Observations: [1, 2] then\n[{\"name\": \"a\", \"description\": \"d\"}]";
        let v = extract_json(text, JsonShape::ArrayOfObjects).unwrap();
        assert_eq!(v, json!([{"name": "a", "description": "d"}]));
        // An inner bracket of a string array is not mistaken for the outer value.
        let v = extract_json("[\"x [y]\", \"z\"]", JsonShape::ArrayOfStrings).unwrap();
        assert_eq!(v, json!(["x [y]", "z"]));
    }

    #[test]
    fn truncated_value_is_malformed() {
        assert!(extract_json("[\"a\", \"b\"", JsonShape::ArrayOfStrings).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_on_serialized_output(items in prop::collection::vec("[ -~]{0,20}", 0..6), prose in "[a-zA-Z .!]{0,30}") {
            let v = Value::from(items);
            let text = format!("{prose}\n```json\n{}\n```", serde_json::to_string_pretty(&v).unwrap());
            let once = extract_json(&text, JsonShape::ArrayOfStrings).unwrap();
            let twice = extract_json(&serde_json::to_string(&once).unwrap(), JsonShape::ArrayOfStrings).unwrap();
            prop_assert_eq!(&once, &v);
            prop_assert_eq!(once, twice);
        }
    }
}
