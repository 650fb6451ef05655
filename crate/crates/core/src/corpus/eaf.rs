//! ELAN EAF import.
//!
//! Covers the EAF subset needed for annotation ingest: `TIME_ORDER` /
//! `TIME_SLOT` elements with millisecond `TIME_VALUE`s and
//! `ALIGNABLE_ANNOTATION`s on named tiers. Each annotation interval
//! `[a_ms, b_ms)` is rasterized onto one-second bins: bin `t` is active iff
//! the overlap with `[t, t+1)` seconds is at least 0.5 s or the annotation
//! fully contains the bin.
//!
//! The scanner below is a deliberately small XML reader for that subset
//! (declarations, comments, elements, attributes, entity references). It is
//! an importer only; exports use the canonical line-delimited format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::corpus::VideoAnnotationTrack;
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;

#[derive(Debug, PartialEq)]
enum XmlEvent {
    Open {
        name: String,
        attrs: HashMap<String, String>,
        self_closing: bool,
    },
    Close {
        name: String,
    },
}

struct XmlScanner<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> XmlScanner<'a> {
    fn new(text: &'a str) -> Self {
        XmlScanner { text, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Eaf(format!("{} (byte {})", msg.into(), self.pos))
    }

    /// Next element event, skipping text content, comments, declarations,
    /// and processing instructions.
    fn next_event(&mut self) -> Result<Option<XmlEvent>> {
        loop {
            match self.text[self.pos..].find('<') {
                None => {
                    if self.text[self.pos..].trim().is_empty() {
                        return Ok(None);
                    }
                    return Err(self.err("stray text after last element"));
                }
                Some(off) => self.pos += off,
            }
            let rest = &self.text[self.pos..];
            if rest.starts_with("<!--") {
                let end = rest
                    .find("-->")
                    .ok_or_else(|| self.err("unterminated comment"))?;
                self.pos += end + 3;
                continue;
            }
            if rest.starts_with("<?") {
                let end = rest
                    .find("?>")
                    .ok_or_else(|| self.err("unterminated processing instruction"))?;
                self.pos += end + 2;
                continue;
            }
            if rest.starts_with("<!") {
                let end = rest
                    .find('>')
                    .ok_or_else(|| self.err("unterminated declaration"))?;
                self.pos += end + 1;
                continue;
            }
            return self.read_tag().map(Some);
        }
    }

    fn read_tag(&mut self) -> Result<XmlEvent> {
        debug_assert!(self.text[self.pos..].starts_with('<'));
        self.pos += 1;
        let closing = self.text[self.pos..].starts_with('/');
        if closing {
            self.pos += 1;
        }
        let name = self.read_name()?;
        if closing {
            self.skip_ws();
            if !self.text[self.pos..].starts_with('>') {
                return Err(self.err(format!("malformed closing tag </{name}")));
            }
            self.pos += 1;
            return Ok(XmlEvent::Close { name });
        }

        let mut attrs = HashMap::new();
        loop {
            self.skip_ws();
            let rest = &self.text[self.pos..];
            if let Some(stripped) = rest.strip_prefix("/>") {
                let _ = stripped;
                self.pos += 2;
                return Ok(XmlEvent::Open {
                    name,
                    attrs,
                    self_closing: true,
                });
            }
            if rest.starts_with('>') {
                self.pos += 1;
                return Ok(XmlEvent::Open {
                    name,
                    attrs,
                    self_closing: false,
                });
            }
            if rest.is_empty() {
                return Err(self.err(format!("unterminated tag <{name}")));
            }
            let key = self.read_name()?;
            self.skip_ws();
            if !self.text[self.pos..].starts_with('=') {
                return Err(self.err(format!("attribute {key} missing '='")));
            }
            self.pos += 1;
            self.skip_ws();
            let quote = self.text[self.pos..]
                .chars()
                .next()
                .filter(|c| *c == '"' || *c == '\'')
                .ok_or_else(|| self.err(format!("attribute {key} missing quote")))?;
            self.pos += 1;
            let end = self.text[self.pos..]
                .find(quote)
                .ok_or_else(|| self.err(format!("attribute {key} unterminated")))?;
            let raw = &self.text[self.pos..self.pos + end];
            self.pos += end + 1;
            attrs.insert(key, decode_entities(raw)?);
        }
    }

    fn read_name(&mut self) -> Result<String> {
        let start = self.pos;
        for (off, c) in self.text[self.pos..].char_indices() {
            if c.is_alphanumeric() || c == '_' || c == '-' || c == ':' || c == '.' {
                continue;
            }
            self.pos = start + off;
            if off == 0 {
                return Err(self.err("expected name"));
            }
            return Ok(self.text[start..start + off].to_string());
        }
        Err(self.err("unterminated name"))
    }

    fn skip_ws(&mut self) {
        let trimmed = self.text[self.pos..].trim_start();
        self.pos = self.text.len() - trimmed.len();
    }
}

fn decode_entities(raw: &str) -> Result<String> {
    if !raw.contains('&') {
        return Ok(raw.to_string());
    }
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find('&') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let end = tail
            .find(';')
            .ok_or_else(|| Error::Eaf(format!("unterminated entity in {raw:?}")))?;
        let entity = &tail[1..end];
        match entity {
            "amp" => out.push('&'),
            "lt" => out.push('<'),
            "gt" => out.push('>'),
            "quot" => out.push('"'),
            "apos" => out.push('\''),
            _ => {
                let code = entity
                    .strip_prefix("#x")
                    .map(|h| u32::from_str_radix(h, 16))
                    .or_else(|| entity.strip_prefix('#').map(|d| d.parse::<u32>()))
                    .transpose()
                    .ok()
                    .flatten()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Eaf(format!("unknown entity &{entity};")))?;
                out.push(code);
            }
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// An alignable annotation pulled out of one tier.
#[derive(Debug, Clone, PartialEq, Eq)]
struct TierAnnotation {
    tier: String,
    start_ms: u64,
    end_ms: u64,
}

fn parse_eaf(text: &str) -> Result<Vec<TierAnnotation>> {
    let mut scanner = XmlScanner::new(text);
    let mut slots: HashMap<String, u64> = HashMap::new();
    let mut annotations = Vec::new();
    let mut tier_stack: Vec<Option<String>> = Vec::new();
    let mut pending: Vec<(String, String, String)> = Vec::new(); // tier, ref1, ref2
    let mut depth_guard: Vec<String> = Vec::new();

    while let Some(event) = scanner.next_event()? {
        match event {
            XmlEvent::Open {
                name,
                attrs,
                self_closing,
            } => {
                match name.as_str() {
                    "TIME_SLOT" => {
                        let id = attrs.get("TIME_SLOT_ID").cloned().ok_or_else(|| {
                            Error::Eaf("TIME_SLOT missing TIME_SLOT_ID".into())
                        })?;
                        if let Some(value) = attrs.get("TIME_VALUE") {
                            let ms = value.parse::<u64>().map_err(|_| {
                                Error::Eaf(format!("bad TIME_VALUE {value:?}"))
                            })?;
                            slots.insert(id, ms);
                        }
                    }
                    "TIER" => {
                        let id = attrs
                            .get("TIER_ID")
                            .cloned()
                            .ok_or_else(|| Error::Eaf("TIER missing TIER_ID".into()))?;
                        if !self_closing {
                            tier_stack.push(Some(id));
                        }
                    }
                    "ALIGNABLE_ANNOTATION" => {
                        let tier = tier_stack
                            .iter()
                            .rev()
                            .flatten()
                            .next()
                            .cloned()
                            .ok_or_else(|| {
                                Error::Eaf("ALIGNABLE_ANNOTATION outside TIER".into())
                            })?;
                        let ref1 = attrs.get("TIME_SLOT_REF1").cloned().ok_or_else(|| {
                            Error::Eaf("ALIGNABLE_ANNOTATION missing TIME_SLOT_REF1".into())
                        })?;
                        let ref2 = attrs.get("TIME_SLOT_REF2").cloned().ok_or_else(|| {
                            Error::Eaf("ALIGNABLE_ANNOTATION missing TIME_SLOT_REF2".into())
                        })?;
                        pending.push((tier, ref1, ref2));
                    }
                    _ => {}
                }
                if !self_closing && name != "TIER" {
                    depth_guard.push(name);
                }
            }
            XmlEvent::Close { name } => {
                if name == "TIER" {
                    if tier_stack.pop().is_none() {
                        return Err(Error::Eaf("unbalanced </TIER>".into()));
                    }
                } else {
                    match depth_guard.pop() {
                        Some(open) if open == name => {}
                        Some(open) => {
                            return Err(Error::Eaf(format!(
                                "mismatched </{name}> closing <{open}>"
                            )))
                        }
                        None => return Err(Error::Eaf(format!("unbalanced </{name}>"))),
                    }
                }
            }
        }
    }
    if !depth_guard.is_empty() || !tier_stack.is_empty() {
        return Err(Error::Eaf("unclosed elements at end of document".into()));
    }

    for (tier, ref1, ref2) in pending {
        let start_ms = *slots.get(&ref1).ok_or_else(|| {
            Error::Eaf(format!("time slot {ref1:?} missing or has no TIME_VALUE"))
        })?;
        let end_ms = *slots.get(&ref2).ok_or_else(|| {
            Error::Eaf(format!("time slot {ref2:?} missing or has no TIME_VALUE"))
        })?;
        if end_ms < start_ms {
            return Err(Error::Eaf(format!(
                "annotation on tier {tier:?} ends ({end_ms} ms) before it starts ({start_ms} ms)"
            )));
        }
        annotations.push(TierAnnotation {
            tier,
            start_ms,
            end_ms,
        });
    }
    Ok(annotations)
}

/// Whether annotation `[a_ms, b_ms)` activates one-second bin `t`.
fn bin_active(a_ms: u64, b_ms: u64, t: u64) -> bool {
    let bin_start = t * 1000;
    let bin_end = bin_start + 1000;
    let overlap = b_ms.min(bin_end).saturating_sub(a_ms.max(bin_start));
    overlap >= 500 || (a_ms <= bin_start && b_ms >= bin_end)
}

/// Imports one EAF file as a per-second annotation track.
///
/// `tier_map` maps tier names to label names; annotations on unmapped tiers
/// are skipped with a warning. The track duration is the smallest whole
/// second covering every mapped annotation, or `min_duration_s` if larger.
pub fn import_eaf(
    path: impl AsRef<Path>,
    tier_map: &BTreeMap<String, String>,
    space: &LabelSpace,
    min_duration_s: u32,
) -> Result<VideoAnnotationTrack> {
    let path = path.as_ref();
    let lesson_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eaf".to_string());
    let text = std::fs::read_to_string(path)?;
    import_eaf_str(&lesson_id, &text, tier_map, space, min_duration_s)
}

/// See [`import_eaf`]; operates on already-loaded XML text.
pub fn import_eaf_str(
    lesson_id: &str,
    text: &str,
    tier_map: &BTreeMap<String, String>,
    space: &LabelSpace,
    min_duration_s: u32,
) -> Result<VideoAnnotationTrack> {
    for label in tier_map.values() {
        if space.index_of(label).is_none() {
            return Err(Error::UnknownLabel(label.clone()));
        }
    }
    let annotations = parse_eaf(text)?;

    let mut mapped: Vec<(usize, u64, u64)> = Vec::new();
    let mut max_end_ms = 0u64;
    for ann in annotations {
        match tier_map.get(&ann.tier) {
            Some(label) => {
                let idx = space.index_of(label).expect("validated above");
                max_end_ms = max_end_ms.max(ann.end_ms);
                mapped.push((idx, ann.start_ms, ann.end_ms));
            }
            None => {
                log::warn!(
                    "eaf {lesson_id}: skipping annotation on unmapped tier {:?}",
                    ann.tier
                );
            }
        }
    }

    let duration_s = (max_end_ms.div_ceil(1000) as u32).max(min_duration_s);
    let mut track = VideoAnnotationTrack::zeros(lesson_id, duration_s, space.len());
    for (idx, a_ms, b_ms) in mapped {
        if a_ms == b_ms {
            continue;
        }
        let first = a_ms / 1000;
        let last = b_ms.div_ceil(1000);
        for t in first..last {
            if t as u32 >= duration_s {
                break;
            }
            if bin_active(a_ms, b_ms, t) {
                track.raster[(t as usize, idx)] = 1;
            }
        }
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eaf_doc(body: &str) -> String {
        format!(
            r#"<?xml version="1.0" encoding="UTF-8"?>
<ANNOTATION_DOCUMENT AUTHOR="" FORMAT="3.0">
{body}
</ANNOTATION_DOCUMENT>"#
        )
    }

    fn tier_map() -> BTreeMap<String, String> {
        BTreeMap::from([("transitions".to_string(), "Transition".to_string())])
    }

    #[test]
    fn one_to_three_seconds_activates_bins_one_and_two() {
        let doc = eaf_doc(
            r#"<TIME_ORDER>
  <TIME_SLOT TIME_SLOT_ID="ts1" TIME_VALUE="1000"/>
  <TIME_SLOT TIME_SLOT_ID="ts2" TIME_VALUE="3000"/>
</TIME_ORDER>
<TIER TIER_ID="transitions">
  <ANNOTATION>
    <ALIGNABLE_ANNOTATION ANNOTATION_ID="a1" TIME_SLOT_REF1="ts1" TIME_SLOT_REF2="ts2">
      <ANNOTATION_VALUE>x</ANNOTATION_VALUE>
    </ALIGNABLE_ANNOTATION>
  </ANNOTATION>
</TIER>"#,
        );
        let space = crate::labelspace::LabelSpace::bundled_activity();
        let track = import_eaf_str("L1", &doc, &tier_map(), &space, 0).unwrap();
        let col = space.index_of("Transition").unwrap();
        let active: Vec<usize> = track
            .raster
            .column(col)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(t, _)| t)
            .collect();
        assert_eq!(active, vec![1, 2]);
    }

    #[test]
    fn sub_half_second_overlap_activates_nothing() {
        let doc = eaf_doc(
            r#"<TIME_ORDER>
  <TIME_SLOT TIME_SLOT_ID="ts1" TIME_VALUE="1000"/>
  <TIME_SLOT TIME_SLOT_ID="ts2" TIME_VALUE="1200"/>
</TIME_ORDER>
<TIER TIER_ID="transitions">
  <ANNOTATION>
    <ALIGNABLE_ANNOTATION ANNOTATION_ID="a1" TIME_SLOT_REF1="ts1" TIME_SLOT_REF2="ts2">
      <ANNOTATION_VALUE>x</ANNOTATION_VALUE>
    </ALIGNABLE_ANNOTATION>
  </ANNOTATION>
</TIER>"#,
        );
        let space = crate::labelspace::LabelSpace::bundled_activity();
        let track = import_eaf_str("L1", &doc, &tier_map(), &space, 0).unwrap();
        assert!(track.raster.iter().all(|v| *v == 0));
    }

    #[test]
    fn empty_tier_gives_zero_column() {
        let doc = eaf_doc(
            r#"<TIME_ORDER>
  <TIME_SLOT TIME_SLOT_ID="ts1" TIME_VALUE="2000"/>
</TIME_ORDER>
<TIER TIER_ID="transitions">
</TIER>"#,
        );
        let space = crate::labelspace::LabelSpace::bundled_activity();
        let track = import_eaf_str("L1", &doc, &tier_map(), &space, 4).unwrap();
        assert_eq!(track.duration_s, 4);
        assert!(track.raster.iter().all(|v| *v == 0));
    }

    #[test]
    fn unmapped_tier_is_skipped() {
        let doc = eaf_doc(
            r#"<TIME_ORDER>
  <TIME_SLOT TIME_SLOT_ID="ts1" TIME_VALUE="0"/>
  <TIME_SLOT TIME_SLOT_ID="ts2" TIME_VALUE="2000"/>
</TIME_ORDER>
<TIER TIER_ID="unmapped">
  <ANNOTATION>
    <ALIGNABLE_ANNOTATION ANNOTATION_ID="a1" TIME_SLOT_REF1="ts1" TIME_SLOT_REF2="ts2">
      <ANNOTATION_VALUE>x</ANNOTATION_VALUE>
    </ALIGNABLE_ANNOTATION>
  </ANNOTATION>
</TIER>"#,
        );
        let space = crate::labelspace::LabelSpace::bundled_activity();
        let track = import_eaf_str("L1", &doc, &tier_map(), &space, 0).unwrap();
        assert!(track.raster.iter().all(|v| *v == 0));
    }

    #[test]
    fn malformed_xml_is_rejected() {
        let space = crate::labelspace::LabelSpace::bundled_activity();
        for doc in [
            "<TIER TIER_ID=\"t\"><ANNOTATION></TIER>",
            "<TIER TIER_ID='t'",
            "<TIME_ORDER><TIME_SLOT TIME_SLOT_ID=ts1/></TIME_ORDER>",
        ] {
            assert!(
                import_eaf_str("L1", doc, &tier_map(), &space, 0).is_err(),
                "doc should be rejected: {doc}"
            );
        }
    }

    #[test]
    fn containment_rule_matches_overlap_rule_on_whole_bins() {
        // An annotation covering a full bin activates it regardless of how
        // the rule fires.
        assert!(bin_active(0, 5000, 3));
        assert!(bin_active(2500, 3100, 2)); // 0.5 s overlap with [2,3)
        assert!(!bin_active(2501, 3000, 2)); // 0.499 s
    }

    #[test]
    fn extending_an_interval_never_deactivates_bins() {
        // Rasterization monotonicity, checked over a small grid.
        for a in 0..20u64 {
            for b in a..24u64 {
                for ext in 0..4u64 {
                    for t in 0..6u64 {
                        let before = bin_active(a * 250, b * 250, t);
                        let after = bin_active(a * 250, (b + ext) * 250, t);
                        assert!(
                            !before || after,
                            "extension deactivated bin {t} for [{a},{b}]+{ext}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn entity_decoding_in_attributes() {
        let doc = eaf_doc(
            r#"<TIME_ORDER>
  <TIME_SLOT TIME_SLOT_ID="ts1" TIME_VALUE="0"/>
  <TIME_SLOT TIME_SLOT_ID="ts2" TIME_VALUE="1000"/>
</TIME_ORDER>
<TIER TIER_ID="a &amp; b">
  <ANNOTATION>
    <ALIGNABLE_ANNOTATION ANNOTATION_ID="a1" TIME_SLOT_REF1="ts1" TIME_SLOT_REF2="ts2">
      <ANNOTATION_VALUE>x</ANNOTATION_VALUE>
    </ALIGNABLE_ANNOTATION>
  </ANNOTATION>
</TIER>"#,
        );
        let space = crate::labelspace::LabelSpace::bundled_activity();
        let map = BTreeMap::from([("a & b".to_string(), "Transition".to_string())]);
        let track = import_eaf_str("L1", &doc, &map, &space, 0).unwrap();
        let col = space.index_of("Transition").unwrap();
        assert_eq!(track.raster[(0, col)], 1);
    }
}
