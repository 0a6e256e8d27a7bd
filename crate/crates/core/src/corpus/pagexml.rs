//! Reading and writing PAGE XML (2013-07-15 and 2019-07-15 namespaces).

use std::collections::HashSet;
use std::fmt::Write as _;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use super::{normalize_transcription, CorpusError, PageDocument, PageMetadata, Point, TextLine};

pub const NS_2013: &str = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2013-07-15";
pub const NS_2019: &str = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15";

/// A line that was dropped while parsing, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineIssue {
    pub line_id: String,
    pub message: String,
}

/// Result of [`parse_pagexml`]: the valid part of the page plus per-line issues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPage {
    pub doc: PageDocument,
    pub issues: Vec<LineIssue>,
}

#[derive(Default)]
struct LineBuilder {
    id: String,
    baseline: Option<Result<Vec<Point>, String>>,
    polygon: Option<Result<Vec<Point>, String>>,
    text: Option<String>,
    text_done: bool,
}

fn attr(e: &BytesStart<'_>, name: &[u8]) -> Option<String> {
    e.attributes().flatten().find_map(|a| {
        (a.key.local_name().as_ref() == name)
            .then(|| a.unescape_value().ok().map(|v| v.into_owned()))
            .flatten()
    })
}

fn parse_points(s: &str) -> Result<Vec<Point>, String> {
    s.split_whitespace()
        .map(|pair| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| format!("bad point {pair:?}"))?;
            let x: f64 = x.trim().parse().map_err(|_| format!("bad point {pair:?}"))?;
            let y: f64 = y.trim().parse().map_err(|_| format!("bad point {pair:?}"))?;
            Ok(Point::new(x.round() as i32, y.round() as i32))
        })
        .collect()
}

fn format_points(points: &[Point]) -> String {
    let mut s = String::new();
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{},{}", p.x, p.y);
    }
    s
}

fn line_col(bytes: &[u8], offset: usize) -> (usize, usize) {
    let offset = offset.min(bytes.len());
    let before = &bytes[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let col = before
        .iter()
        .rev()
        .take_while(|&&b| b != b'\n')
        .count()
        + 1;
    (line, col)
}

/// Parses a PAGE XML document.
///
/// Lines with an invalid or missing baseline are left out of the document
/// and reported in [`ParsedPage::issues`]; malformed XML is a hard error.
pub fn parse_pagexml(bytes: &[u8]) -> Result<ParsedPage, CorpusError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(false);

    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut doc: Option<PageDocument> = None;
    let mut metadata = PageMetadata::default();
    let mut saw_root = false;
    let mut current: Option<LineBuilder> = None;
    let mut finished: Vec<LineBuilder> = Vec::new();

    let xml_err = |reader: &Reader<&[u8]>, message: String| {
        let (line, column) = line_col(bytes, reader.error_position() as usize);
        CorpusError::Xml {
            line,
            column,
            message,
        }
    };

    loop {
        let event = reader
            .read_event()
            .map_err(|e| xml_err(&reader, e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let name = e.local_name().as_ref().to_vec();
                if !saw_root {
                    saw_root = true;
                    if name != b"PcGts" {
                        return Err(CorpusError::NotPage(format!(
                            "root element is <{}>",
                            String::from_utf8_lossy(&name)
                        )));
                    }
                    let known = e.attributes().flatten().any(|a| {
                        a.key.as_ref().starts_with(b"xmlns")
                            && matches!(a.unescape_value().as_deref(), Ok(NS_2013) | Ok(NS_2019))
                    });
                    if !known {
                        return Err(CorpusError::NotPage(
                            "missing or unsupported PAGE namespace".into(),
                        ));
                    }
                }
                let parent = stack.last().map(|v| v.as_slice());
                match name.as_slice() {
                    b"Page" => {
                        let width = attr(e, b"imageWidth")
                            .and_then(|v| v.parse().ok())
                            .unwrap_or(0);
                        let height = attr(e, b"imageHeight")
                            .and_then(|v| v.parse().ok())
                            .unwrap_or(0);
                        let image = attr(e, b"imageFilename").unwrap_or_default();
                        doc = Some(PageDocument::new(image, width, height));
                    }
                    b"UserAttribute" => {
                        if stack.iter().any(|s| s == b"Metadata") {
                            let value = attr(e, b"value");
                            match attr(e, b"name").as_deref() {
                                Some("roll") => metadata.roll = value,
                                Some("case") => metadata.case_id = value,
                                Some("membrane") => metadata.membrane = value,
                                _ => {}
                            }
                        }
                    }
                    b"TextLine" => {
                        current = Some(LineBuilder {
                            id: attr(e, b"id").unwrap_or_default(),
                            ..Default::default()
                        });
                        if is_empty {
                            finished.extend(current.take());
                        }
                    }
                    b"Baseline" if parent == Some(b"TextLine") => {
                        if let Some(line) = current.as_mut() {
                            line.baseline =
                                Some(parse_points(&attr(e, b"points").unwrap_or_default()));
                        }
                    }
                    b"Coords" if parent == Some(b"TextLine") => {
                        if let Some(line) = current.as_mut() {
                            line.polygon =
                                Some(parse_points(&attr(e, b"points").unwrap_or_default()));
                        }
                    }
                    b"Unicode"
                        if parent == Some(b"TextEquiv")
                            && stack.len() >= 2
                            && stack[stack.len() - 2] == b"TextLine" =>
                    {
                        if let Some(line) = current.as_mut() {
                            if !line.text_done {
                                line.text = Some(String::new());
                            }
                        }
                    }
                    _ => {}
                }
                if !is_empty {
                    stack.push(name);
                }
            }
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                match name.as_slice() {
                    b"TextLine" => finished.extend(current.take()),
                    b"Unicode" => {
                        if let Some(line) = current.as_mut() {
                            if line.text.is_some() {
                                line.text_done = true;
                            }
                        }
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                if stack.last().map(|v| v.as_slice()) == Some(b"Unicode") {
                    if let Some(line) = current.as_mut() {
                        if !line.text_done {
                            if let Some(text) = line.text.as_mut() {
                                let s = t.unescape().map_err(|e| xml_err(&reader, e.to_string()))?;
                                text.push_str(&s);
                            }
                        }
                    }
                }
            }
            Event::CData(t) => {
                if stack.last().map(|v| v.as_slice()) == Some(b"Unicode") {
                    if let Some(text) = current.as_mut().and_then(|l| l.text.as_mut()) {
                        text.push_str(&String::from_utf8_lossy(&t));
                    }
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }

    if !stack.is_empty() {
        let (line, column) = line_col(bytes, bytes.len());
        return Err(CorpusError::Xml {
            line,
            column,
            message: "unexpected end of document".into(),
        });
    }
    let mut doc = doc.ok_or_else(|| CorpusError::NotPage("no <Page> element".into()))?;
    if doc.width == 0 || doc.height == 0 {
        return Err(CorpusError::InvalidPage(
            "imageWidth/imageHeight missing or zero".into(),
        ));
    }
    doc.metadata = metadata;

    let mut issues = Vec::new();
    let mut ids = HashSet::new();
    for b in finished {
        let issue = |message: String| LineIssue {
            line_id: b.id.clone(),
            message,
        };
        let baseline = match &b.baseline {
            None => {
                issues.push(issue("no baseline".into()));
                continue;
            }
            Some(Err(m)) => {
                issues.push(issue(m.clone()));
                continue;
            }
            Some(Ok(points)) => points.clone(),
        };
        let polygon = match b.polygon {
            Some(Ok(p)) if !p.is_empty() => Some(p),
            _ => None,
        };
        let line = TextLine {
            id: b.id.clone(),
            baseline,
            polygon,
            transcription: b.text.as_deref().map(normalize_transcription),
        };
        if let Err(m) = line.validate(doc.width, doc.height) {
            issues.push(issue(m));
            continue;
        }
        if !ids.insert(line.id.clone()) {
            issues.push(issue("duplicate line id".into()));
            continue;
        }
        doc.lines.push(line);
    }
    Ok(ParsedPage { doc, issues })
}

/// Serializes a page as PAGE XML in the 2019-07-15 namespace.
///
/// All lines go into a single text region. A `Coords` element is written for a
/// line only when it carries a polygon.
pub fn write_pagexml(doc: &PageDocument) -> Result<Vec<u8>, CorpusError> {
    doc.validate()?;
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<PcGts xmlns=\"{NS_2019}\" xmlns:xsi=\"http://www.w3.org/2001/XMLSchema-instance\" \
         xsi:schemaLocation=\"{NS_2019} {NS_2019}/pagecontent.xsd\">"
    );
    s.push_str("  <Metadata>\n    <Creator>rotulus</Creator>\n");
    s.push_str("    <Created>1970-01-01T00:00:00</Created>\n");
    s.push_str("    <LastChange>1970-01-01T00:00:00</LastChange>\n");
    let user: Vec<(&str, &str)> = [
        ("roll", doc.metadata.roll.as_deref()),
        ("case", doc.metadata.case_id.as_deref()),
        ("membrane", doc.metadata.membrane.as_deref()),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect();
    if !user.is_empty() {
        s.push_str("    <UserDefined>\n");
        for (k, v) in user {
            let _ = writeln!(
                s,
                "      <UserAttribute name=\"{k}\" type=\"xsd:string\" value=\"{}\"/>",
                escape(v)
            );
        }
        s.push_str("    </UserDefined>\n");
    }
    s.push_str("  </Metadata>\n");
    let _ = writeln!(
        s,
        "  <Page imageFilename=\"{}\" imageWidth=\"{}\" imageHeight=\"{}\">",
        escape(doc.image_ref.as_str()),
        doc.width,
        doc.height
    );
    s.push_str("    <TextRegion id=\"r0\">\n");
    let _ = writeln!(
        s,
        "      <Coords points=\"{}\"/>",
        format_points(&region_box(doc))
    );
    for line in &doc.lines {
        let _ = writeln!(s, "      <TextLine id=\"{}\">", escape(line.id.as_str()));
        if let Some(poly) = &line.polygon {
            let _ = writeln!(s, "        <Coords points=\"{}\"/>", format_points(poly));
        }
        let _ = writeln!(
            s,
            "        <Baseline points=\"{}\"/>",
            format_points(&line.baseline)
        );
        if let Some(text) = &line.transcription {
            let _ = writeln!(
                s,
                "        <TextEquiv>\n          <Unicode>{}</Unicode>\n        </TextEquiv>",
                escape(text.as_str())
            );
        }
        s.push_str("      </TextLine>\n");
    }
    s.push_str("    </TextRegion>\n  </Page>\n</PcGts>\n");
    Ok(s.into_bytes())
}

fn region_box(doc: &PageDocument) -> Vec<Point> {
    let pts = doc
        .lines
        .iter()
        .flat_map(|l| l.baseline.iter().chain(l.polygon.iter().flatten()));
    let (mut x0, mut y0, mut x1, mut y1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
    for p in pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    if x0 > x1 {
        (x0, y0, x1, y1) = (0, 0, doc.width as i32, doc.height as i32);
    }
    vec![
        Point::new(x0, y0),
        Point::new(x1, y0),
        Point::new(x1, y1),
        Point::new(x0, y1),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(ns: &str, lines: &str) -> String {
        format!(
            r#"<?xml version="1.0" encoding="UTF-8"?>
<PcGts xmlns="{ns}">
  <Metadata><Creator>x</Creator></Metadata>
  <Page imageFilename="p.png" imageWidth="400" imageHeight="300">
    <TextRegion id="r1">
      <Coords points="0,0 400,0 400,300 0,300"/>
      <TextEquiv><Unicode>region text</Unicode></TextEquiv>
      {lines}
    </TextRegion>
  </Page>
</PcGts>"#
        )
    }

    #[test]
    fn minimal_line() {
        let xml = page(
            NS_2019,
            r#"<TextLine id="l1"><Baseline points="10,50 200,52"/><TextEquiv><Unicode>abc</Unicode></TextEquiv></TextLine>"#,
        );
        let parsed = parse_pagexml(xml.as_bytes()).unwrap();
        assert!(parsed.issues.is_empty());
        let doc = parsed.doc;
        assert_eq!(doc.lines.len(), 1);
        assert_eq!(
            doc.lines[0].baseline,
            vec![Point::new(10, 50), Point::new(200, 52)]
        );
        assert_eq!(doc.lines[0].transcription.as_deref(), Some("abc"));
    }

    #[test]
    fn missing_text_is_none() {
        let xml = page(
            NS_2013,
            r#"<TextLine id="l1"><Baseline points="10,50 200,52"/></TextLine>"#,
        );
        let doc = parse_pagexml(xml.as_bytes()).unwrap().doc;
        assert_eq!(doc.lines[0].transcription, None);
    }

    #[test]
    fn short_baseline_is_reported() {
        let xml = page(
            NS_2019,
            r#"<TextLine id="a"><Baseline points="10,50 200,52"/></TextLine>
               <TextLine id="b"><Baseline points="10,90"/></TextLine>
               <TextLine id="c"><Baseline points="10,150 200,152"/></TextLine>"#,
        );
        let parsed = parse_pagexml(xml.as_bytes()).unwrap();
        assert_eq!(parsed.doc.lines.len(), 2);
        assert_eq!(parsed.issues.len(), 1);
        assert_eq!(parsed.issues[0].line_id, "b");
    }

    #[test]
    fn malformed_xml_has_position() {
        let xml = format!("<?xml version=\"1.0\"?>\n<PcGts xmlns=\"{NS_2019}\">\n  <Page></Pag>\n</PcGts>");
        match parse_pagexml(xml.as_bytes()) {
            Err(CorpusError::Xml { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected xml error, got {other:?}"),
        }
    }

    #[test]
    fn foreign_namespace_rejected() {
        let xml = page("urn:other", "");
        assert!(matches!(
            parse_pagexml(xml.as_bytes()),
            Err(CorpusError::NotPage(_))
        ));
    }

    #[test]
    fn word_level_text_is_ignored() {
        let xml = page(
            NS_2019,
            r#"<TextLine id="l1"><Baseline points="10,50 200,52"/>
                 <Word id="w1"><TextEquiv><Unicode>nope</Unicode></TextEquiv></Word>
                 <TextEquiv><Unicode>line  text</Unicode></TextEquiv></TextLine>"#,
        );
        let doc = parse_pagexml(xml.as_bytes()).unwrap().doc;
        assert_eq!(doc.lines[0].transcription.as_deref(), Some("line text"));
    }

    #[test]
    fn empty_page_writes_valid_region() {
        let doc = PageDocument::new("p.png", 10, 20);
        let bytes = write_pagexml(&doc).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("<TextRegion id=\"r0\">"));
        let back = parse_pagexml(&bytes).unwrap();
        assert_eq!(back.doc, doc);
    }

    #[test]
    fn round_trip_with_medieval_glyphs() {
        let mut doc = PageDocument::new("roll & case.png", 400, 300);
        doc.metadata.roll = Some("KB27".into());
        doc.metadata.case_id = Some("KB27-263m21".into());
        doc.lines.push(
            TextLine::new("l1", vec![Point::new(10, 50), Point::new(200, 52)])
                .with_text("\u{A751}ro dom<ino> \u{A770}"),
        );
        let mut l2 = TextLine::new("l2", vec![Point::new(10, 100), Point::new(390, 110)])
            .with_text("et \"quod\" <x>");
        l2.polygon = Some(vec![
            Point::new(10, 80),
            Point::new(390, 80),
            Point::new(390, 115),
        ]);
        doc.lines.push(l2);
        let bytes = write_pagexml(&doc).unwrap();
        let back = parse_pagexml(&bytes).unwrap();
        assert!(back.issues.is_empty());
        assert_eq!(back.doc, doc);
    }

    #[test]
    fn write_refuses_invalid_doc() {
        let mut doc = PageDocument::new("p.png", 10, 10);
        doc.lines
            .push(TextLine::new("l", vec![Point::new(1, 1)]));
        assert!(write_pagexml(&doc).is_err());
    }
}
