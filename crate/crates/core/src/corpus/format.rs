//! Line-oriented corpus files.
//!
//! One record per line, tab-separated `key=value` fields in fixed order:
//!
//! ```text
//! id=0<TAB>token_ids=[1 7 9]<TAB>prompt_len=2<TAB>labels=[0]<TAB>answerable=true<TAB>response_kind=faithful<TAB>fact_id=3<TAB>text=<bos> ... <eos>
//! ```

use std::io::{BufRead, Write};
use std::str::FromStr;

use super::{LabeledSample, ResponseKind};
use crate::error::{Error, Result};

const KEYS: [&str; 8] = ["id", "token_ids", "prompt_len", "labels", "answerable", "response_kind", "fact_id", "text"];

fn list<T: std::fmt::Display>(xs: &[T]) -> String {
    let inner: Vec<String> = xs.iter().map(T::to_string).collect();
    format!("[{}]", inner.join(" "))
}

pub fn write_corpus<W: Write>(mut w: W, samples: &[LabeledSample]) -> Result<()> {
    for s in samples {
        writeln!(
            w,
            "id={}\ttoken_ids={}\tprompt_len={}\tlabels={}\tanswerable={}\tresponse_kind={}\tfact_id={}\ttext={}",
            s.id,
            list(&s.token_ids),
            s.prompt_len,
            list(&s.labels),
            s.answerable,
            s.response_kind.as_str(),
            s.fact_id,
            s.text
        )?;
    }
    Ok(())
}

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::format("corpus file", format!("line {line}: {}", detail.into()))
}

fn parse_scalar<T: FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("bad {key} `{v}`")))
}

fn parse_list<T: FromStr>(v: &str, line: usize, key: &str) -> Result<Vec<T>> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| bad(line, format!("{key} is not a bracketed list")))?;
    inner.split_whitespace().map(|x| parse_scalar(x, line, key)).collect()
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(KEYS.len(), '\t').collect();
        if fields.len() != KEYS.len() {
            return Err(bad(n, format!("expected {} fields, found {}", KEYS.len(), fields.len())));
        }
        let mut values = [""; 8];
        for (slot, (field, key)) in values.iter_mut().zip(fields.iter().zip(KEYS)) {
            *slot = field
                .strip_prefix(key)
                .and_then(|s| s.strip_prefix('='))
                .ok_or_else(|| bad(n, format!("expected field `{key}`")))?;
        }
        let sample = LabeledSample {
            id: parse_scalar(values[0], n, "id")?,
            token_ids: parse_list(values[1], n, "token_ids")?,
            prompt_len: parse_scalar(values[2], n, "prompt_len")?,
            labels: parse_list(values[3], n, "labels")?,
            answerable: parse_scalar(values[4], n, "answerable")?,
            response_kind: ResponseKind::parse(values[5]).ok_or_else(|| bad(n, "bad response_kind"))?,
            fact_id: parse_scalar(values[6], n, "fact_id")?,
            text: values[7].to_string(),
        };
        if sample.prompt_len == 0 || sample.prompt_len >= sample.token_ids.len() {
            return Err(bad(n, "prompt_len must satisfy 1 <= L < T"));
        }
        if sample.labels.len() != sample.token_ids.len() - sample.prompt_len {
            return Err(bad(n, "labels length differs from response length"));
        }
        if sample.labels.iter().any(|&l| l > 1) {
            return Err(bad(n, "labels must be binary"));
        }
        out.push(sample);
    }
    Ok(out)
}
