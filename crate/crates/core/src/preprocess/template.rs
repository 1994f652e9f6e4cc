use crate::fsutil;

/// A versioned prompt: system instructions and a user prompt with a `{text}`
/// slot, separated in the source file by a line holding `---`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub name: String,
    pub system: String,
    pub user: String,
    /// SHA-256 of the template source, recorded in every bundle.
    pub hash: String,
}

impl PromptTemplate {
    pub fn parse(name: &str, src: &str) -> Result<Self, String> {
        let (system, user) = src
            .split_once("\n---\n")
            .ok_or_else(|| format!("template `{name}` lacks a `---` separator line"))?;
        if !user.contains("{text}") {
            return Err(format!("template `{name}` has no {{text}} slot"));
        }
        Ok(Self {
            name: name.to_string(),
            system: system.trim().to_string(),
            user: user.trim().to_string(),
            hash: fsutil::sha256_hex(src.as_bytes()),
        })
    }

    pub fn render(&self, text: &str) -> String {
        self.user.replace("{text}", text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    pub refine: PromptTemplate,
    pub summarize: PromptTemplate,
    pub ner: PromptTemplate,
}

impl Templates {
    pub fn bundled() -> Self {
        let t = |name, src| PromptTemplate::parse(name, src).expect("bundled template is valid");
        Self {
            refine: t("refine", include_str!("../../prompts/refine.v1.txt")),
            summarize: t("summarize", include_str!("../../prompts/summarize.v1.txt")),
            ner: t("ner", include_str!("../../prompts/ner.v1.txt")),
        }
    }
}
