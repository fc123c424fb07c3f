//! Three preprocessing and scoring operations exported to the browser page
//! in `www/`. Every export returns a JSON string.

use serde_json::json;
use wasm_bindgen::prelude::*;

use mmsi::corpus::{prune_text, DEFAULT_ROLE_KEYWORDS};
use mmsi::encoder::MASK;
use mmsi::metrics::{log_distance, score1, score2, score3};
use mmsi::preprocess::{mask_text, Strategy};

/// `{"text", "masks", "kept"}`: the rewritten text, its mask-token count and
/// the fraction of characters kept.
pub fn mask_json(text: &str, name: &str, strategy: &str) -> Result<String, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: mmsi::Error| e.to_string())?;
    let out = mask_text(text, name.trim(), strategy).map_err(|e| e.to_string())?;
    let kept = if text.is_empty() { 1.0 } else { out.chars().count() as f64 / text.chars().count() as f64 };
    Ok(json!({ "text": out, "masks": out.matches(MASK).count(), "kept": kept }).to_string())
}

/// `{"log_distance", "score1", "score2", "score3"}` for one prediction.
pub fn scores_json(y: f64, y_hat: f64, prison_max: f64) -> Result<String, String> {
    let s1 = score1(y, y_hat).map_err(|e| e.to_string())?;
    let s2 = score2(y, y_hat).map_err(|e| e.to_string())?;
    let s3 = score3(y, y_hat, prison_max).map_err(|e| e.to_string())?;
    Ok(json!({ "log_distance": log_distance(y, y_hat), "score1": s1, "score2": s2, "score3": s3 }).to_string())
}

/// `{"text", "removed"}`. `keywords` is comma-separated; blank means the
/// default role words.
pub fn prune_json(text: &str, keywords: &str) -> String {
    let words: Vec<&str> = keywords.split(',').map(str::trim).filter(|w| !w.is_empty()).collect();
    let (out, removed) =
        if words.is_empty() { prune_text(text, &DEFAULT_ROLE_KEYWORDS) } else { prune_text(text, &words) };
    json!({ "text": out, "removed": removed }).to_string()
}

#[wasm_bindgen]
pub fn mask(text: &str, name: &str, strategy: &str) -> Result<String, JsError> {
    mask_json(text, name, strategy).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn imprisonment_scores(y: f64, y_hat: f64, prison_max: f64) -> Result<String, JsError> {
    scores_json(y, y_hat, prison_max).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn prune(text: &str, keywords: &str) -> String {
    prune_json(text, keywords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn mask_reports_count() {
        let v = parse(&mask_json("Zhang hit Wang. Zhang fled.", "Zhang", "mask").unwrap());
        assert_eq!(v["text"], "[MASK] hit Wang. [MASK] fled.");
        assert_eq!(v["masks"], 2);
        let v = parse(&mask_json("Zhang hit Wang. Li fled.", "Zhang", "split").unwrap());
        assert_eq!(v["text"], "Zhang hit Wang.");
        assert!(mask_json("Li fled.", "Zhang", "mask").unwrap_err().contains("Zhang"));
        assert!(mask_json("x", "x", "blur").is_err());
    }

    #[test]
    fn scores_at_the_edges() {
        let v = parse(&scores_json(24.0, 24.0, 180.0).unwrap());
        assert_eq!(v["score1"], 1.0);
        assert_eq!(v["score2"], 1.0);
        assert_eq!(v["score3"], 0.0);
        assert!(scores_json(-1.0, 3.0, 180.0).is_err());
    }

    #[test]
    fn prune_defaults_and_custom_words() {
        let cv = "Zhang is a principal. Both stole a car. Li is an accomplice.";
        let v = parse(&prune_json(cv, ""));
        assert_eq!(v["removed"], 2);
        assert_eq!(v["text"].as_str().unwrap().trim(), "Both stole a car.");
        assert_eq!(parse(&prune_json(cv, "car"))["removed"], 1);
    }
}
