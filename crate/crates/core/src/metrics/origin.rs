//! Emitted text annotated with the stage each token came from.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::engine::Generation;
use crate::error::{Error, Result};
use crate::tree::StageTag;
use crate::vocab::{decode, TokenId};

/// Emitted tokens and their origins, one tag per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OriginMarkup {
    tokens: Vec<TokenId>,
    origins: Vec<StageTag>,
}

impl OriginMarkup {
    pub fn new(tokens: Vec<TokenId>, origins: Vec<StageTag>) -> Result<Self> {
        if tokens.len() != origins.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} origin tags",
                tokens.len(),
                origins.len()
            )));
        }
        Ok(OriginMarkup { tokens, origins })
    }

    pub fn from_generation(g: &Generation) -> Self {
        OriginMarkup { tokens: g.tokens.clone(), origins: g.origins.clone() }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn origins(&self) -> &[StageTag] {
        &self.origins
    }

    /// Maximal runs of consecutive tokens with the same origin.
    fn runs(&self) -> impl Iterator<Item = (StageTag, &[TokenId])> {
        let mut start = 0;
        std::iter::from_fn(move || {
            if start >= self.tokens.len() {
                return None;
            }
            let tag = self.origins[start];
            let len = self.origins[start..].iter().take_while(|&&t| t == tag).count();
            let run = &self.tokens[start..start + len];
            start += len;
            Some((tag, run))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginFormat {
    Ansi,
    Html,
}

impl FromStr for OriginFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(OriginFormat::Ansi),
            "html" => Ok(OriginFormat::Html),
            other => Err(Error::InvalidArgument(format!("unknown origin format {other:?}"))),
        }
    }
}

fn ansi_background(tag: StageTag) -> &'static str {
    match tag {
        StageTag::Draft2 => "\x1b[42m",
        StageTag::Draft => "\x1b[44m",
        StageTag::Oracle => "\x1b[41m",
    }
}

fn html_color(tag: StageTag) -> &'static str {
    match tag {
        StageTag::Draft2 => "#b6f2b6",
        StageTag::Draft => "#b6cff2",
        StageTag::Oracle => "#f2b6b6",
    }
}

/// Render with green (draft²), blue (draft) and red (oracle) backgrounds.
///
/// Bytes of a multi-byte character split across runs of different origin are
/// decoded lossily within each run.
pub fn render_origin(markup: &OriginMarkup, format: OriginFormat) -> String {
    let mut out = String::new();
    match format {
        OriginFormat::Ansi => {
            for (tag, run) in markup.runs() {
                let _ = write!(out, "{}{}\x1b[0m", ansi_background(tag), decode(run));
            }
        }
        OriginFormat::Html => {
            out.push_str("<pre class=\"origins\">");
            for (tag, run) in markup.runs() {
                let _ = write!(
                    out,
                    "<span class=\"{}\" style=\"background:{}\">{}</span>",
                    tag,
                    html_color(tag),
                    html_escape::encode_text(&decode(run))
                );
            }
            out.push_str("</pre>\n");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::encode_prompt;

    fn markup(text: &str, tags: &[StageTag]) -> OriginMarkup {
        OriginMarkup::new(encode_prompt(text)[1..].to_vec(), tags.to_vec()).unwrap()
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(OriginMarkup::new(vec![TokenId(1)], vec![]).is_err());
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(matches!("svg".parse::<OriginFormat>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ansi_groups_runs() {
        use StageTag::*;
        let m = markup("abc", &[Draft2, Draft2, Oracle]);
        assert_eq!(render_origin(&m, OriginFormat::Ansi), "\x1b[42mab\x1b[0m\x1b[41mc\x1b[0m");
    }

    #[test]
    fn html_escapes() {
        use StageTag::*;
        let m = markup("<a&", &[Draft, Draft, Draft]);
        let html = render_origin(&m, OriginFormat::Html);
        assert!(html.contains("&lt;a&amp;"), "{html}");
        assert!(html.contains("class=\"draft\""));
    }
}
