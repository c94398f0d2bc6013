use std::fmt;

use helix_core::corpus::InputDomain;

/// An argument the user got wrong; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// `1,2,-3` → words. The empty string is the empty input.
pub fn parse_words(text: &str) -> Result<Vec<i64>, Usage> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(|w| w.parse().map_err(|_| Usage(format!("not an integer word: {w:?}"))))
        .collect()
}

/// One input vector per line, words separated by commas or spaces. Blank
/// lines and `#` comments are skipped; a line holding only `-` is the empty
/// input.
pub fn parse_input_file(text: &str) -> Result<Vec<Vec<i64>>, Usage> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        match line {
            "" => {}
            "-" => out.push(Vec::new()),
            _ => out.push(parse_words(line).map_err(|Usage(m)| Usage(format!("line {}: {m}", k + 1)))?),
        }
    }
    Ok(out)
}

/// `lo..hi`, inclusive.
pub fn parse_range(text: &str) -> Result<(i64, i64), Usage> {
    let bad = || Usage(format!("expected lo..hi, got {text:?}"));
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let (lo, hi): (i64, i64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Where verify gets its inputs from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputSource {
    File(String),
    Random { count: usize, seed: u64 },
}

impl InputSource {
    pub fn parse(text: &str) -> Result<InputSource, Usage> {
        let Some(rest) = text.strip_prefix("random:") else { return Ok(InputSource::File(text.to_string())) };
        let bad = || Usage(format!("expected random:N:SEED, got {text:?}"));
        let (n, seed) = rest.split_once(':').ok_or_else(bad)?;
        Ok(InputSource::Random { count: n.parse().map_err(|_| bad())?, seed: seed.parse().map_err(|_| bad())? })
    }

    pub fn load(&self, domain: InputDomain) -> anyhow::Result<Vec<Vec<i64>>> {
        match self {
            InputSource::Random { count, seed } => Ok(domain.sample(*count, *seed)),
            InputSource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{path}: {e}"))?;
                Ok(parse_input_file(&text).map_err(|Usage(m)| Usage(format!("{path}: {m}")))?)
            }
        }
    }
}
