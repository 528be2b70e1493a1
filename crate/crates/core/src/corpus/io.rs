//! Tab-separated corpus files.
//!
//! `events.tsv`: `user  item  polarity  reason  day`, one event per line.
//! `items.tsv`: `item  category  f_1 ... f_d`, one item per line.
//! No header lines. Floats use Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Corpus, InteractionEvent, ItemDescriptor, ItemId, UserId};
use crate::error::{Error, Result};

pub fn write_events(events: &[InteractionEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 24);
    for e in events {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.user, e.item, e.polarity.as_str(), e.reason.as_str(), e.day);
    }
    out
}

pub fn write_items(items: &[ItemDescriptor]) -> String {
    let mut out = String::new();
    for it in items {
        let _ = write!(out, "{}\t{}", it.item, it.category);
        for v in &it.features {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

fn field<'a>(parts: &mut impl Iterator<Item = &'a str>, line: usize, what: &str) -> Result<&'a str> {
    parts.next().ok_or_else(|| Error::Format(format!("line {line}: missing {what}")))
}

fn num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("line {line}: bad {what} {s:?}")))
}

pub fn read_events(text: &str) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = n + 1;
        let mut parts = line.split('\t');
        let user = UserId(num(field(&mut parts, line_no, "user")?, line_no, "user")?);
        let item = ItemId(num(field(&mut parts, line_no, "item")?, line_no, "item")?);
        let polarity = field(&mut parts, line_no, "polarity")?.parse()?;
        let reason = field(&mut parts, line_no, "reason")?.parse()?;
        let day = num(field(&mut parts, line_no, "day")?, line_no, "day")?;
        if parts.next().is_some() {
            return Err(Error::Format(format!("line {line_no}: trailing fields")));
        }
        out.push(InteractionEvent::new(user, item, polarity, reason, day)?);
    }
    Ok(out)
}

pub fn read_items(text: &str) -> Result<Vec<ItemDescriptor>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = n + 1;
        let mut parts = line.split('\t');
        let item = ItemId(num(field(&mut parts, line_no, "item")?, line_no, "item")?);
        let category = num(field(&mut parts, line_no, "category")?, line_no, "category")?;
        let features = parts.map(|p| num(p, line_no, "feature")).collect::<Result<Vec<f64>>>()?;
        out.push(ItemDescriptor { item, category, features });
    }
    Ok(out)
}

/// Loads `events.tsv` and `items.tsv` from `dir`. Users are every id that
/// appears in the event file; the day count is one past the last event day.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let events = read_events(&fs::read_to_string(dir.join("events.tsv"))?)?;
    let items = read_items(&fs::read_to_string(dir.join("items.tsv"))?)?;
    let users: Vec<UserId> = events.iter().map(|e| e.user).collect::<BTreeSet<_>>().into_iter().collect();
    let num_days = events.iter().map(|e| e.day + 1).max().unwrap_or(1);
    Corpus::new(events, items, users, num_days)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Polarity, Reason};

    #[test]
    fn events_round_trip() {
        let events = vec![
            InteractionEvent::new(UserId(3), ItemId(9), Polarity::NegativeFeedback, Reason::NotThisStore, 4).unwrap(),
            InteractionEvent::new(UserId(1), ItemId(2), Polarity::Exposure, Reason::None, 0).unwrap(),
        ];
        let text = write_events(&events);
        assert_eq!(text.lines().next().unwrap(), "3\t9\tnegative\tnot_this_store\t4");
        assert_eq!(read_events(&text).unwrap(), events);
    }

    #[test]
    fn items_round_trip_losslessly() {
        let items = vec![ItemDescriptor { item: ItemId(0), category: 2, features: vec![0.1, -1.0 / 3.0, 1e-17] }];
        assert_eq!(read_items(&write_items(&items)).unwrap(), items);
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(read_events("1\t2\tclick\tnone").is_err());
        assert!(read_events("1\t2\tclick\tnot_this_store\t0").is_err());
        assert!(read_events("x\t2\tclick\tnone\t0").is_err());
    }
}
