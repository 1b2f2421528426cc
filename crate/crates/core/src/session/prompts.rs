use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SessionError;

/// Screen ids that ship with a default prompt.
pub const SCREENS: [&str; 8] = [
    "overview",
    "exploration",
    "selection",
    "training",
    "weights",
    "personas",
    "performance",
    "fairness",
];

fn default_prompt(screen: &str) -> Option<&'static str> {
    Some(match screen {
        "overview" => "What matters most to you when you picture the applicants and the class you would want to admit?",
        "exploration" => "Which factors in the past data surprised you, and what might explain the pattern?",
        "selection" => "Should this factor be part of how decisions are made? Note your reasons and anything you are unsure about.",
        "training" => "While the models train, think about what you expect your model to reward.",
        "weights" => "Where do your model and the group model weigh factors differently, and does that match your intent?",
        "personas" => "If the prediction from the models and the actual admission decision differs, which do you agree with and why?",
        "performance" => "Which kind of error would be more costly here: admitting someone past committees rejected, or rejecting someone they admitted?",
        "fairness" => "Which definition of fairness fits this decision best, and what would you trade to satisfy it?",
        _ => return None,
    })
}

/// Reflective prompts keyed by screen id, plus the asset shown while models
/// train.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptConfig {
    #[serde(default)]
    pub prompts: BTreeMap<String, String>,
    #[serde(default)]
    pub training_video: Option<String>,
}

impl PromptConfig {
    /// Reads overrides from a TOML document:
    ///
    /// ```toml
    /// training_video = "media/training.mp4"
    /// [prompts]
    /// personas = "Which decision do you side with?"
    /// ```
    pub fn from_toml(text: &str) -> Result<Self, SessionError> {
        toml::from_str(text).map_err(|e| SessionError::PromptConfig(e.to_string()))
    }

    pub fn prompt(&self, screen: &str) -> Result<&str, SessionError> {
        self.prompts
            .get(screen)
            .map(String::as_str)
            .or_else(|| default_prompt(screen))
            .ok_or_else(|| SessionError::UnknownScreen(screen.to_string()))
    }
}
