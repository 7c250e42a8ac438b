//! ASCII PLY with `x y z` coordinates and a `label` byte
//! (0 = wall, 1 = floor, 2 = target).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Label, LabeledPoint};
use crate::error::{Error, Result};

pub fn write_ply<W: Write>(mut out: W, points: &[LabeledPoint]) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "comment labels: 0 wall, 1 floor, 2 target")?;
    writeln!(out, "element vertex {}", points.len())?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    writeln!(out, "property uchar label")?;
    writeln!(out, "end_header")?;
    for p in points {
        // `{:?}` prints the shortest representation that round-trips.
        let [x, y, z] = p.position;
        writeln!(out, "{x:?} {y:?} {z:?} {}", p.label.code())?;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    X,
    Y,
    Z,
    Label,
    Ignored,
}

pub fn read_ply<R: BufRead>(input: R) -> Result<Vec<LabeledPoint>> {
    let bad = |reason: String| Error::format("PLY", reason);
    let mut lines = input.lines();
    let mut next = || -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| bad(format!("read failure: {e}")))
    };

    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic".into()));
    }
    let mut count = None;
    let mut fields = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?.ok_or_else(|| bad("header ends without `end_header`".into()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _ty, name] if in_vertex => fields.push(match *name {
                "x" => Field::X,
                "y" => Field::Y,
                "z" => Field::Z,
                "label" => Field::Label,
                _ => Field::Ignored,
            }),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    for needed in [Field::X, Field::Y, Field::Z, Field::Label] {
        if !fields.contains(&needed) {
            return Err(bad("vertex element needs x, y, z and label".into()));
        }
    }

    let mut points = Vec::with_capacity(count);
    for row in 0..count {
        let line = next()?.ok_or_else(|| bad(format!("expected {count} vertices, found {row}")))?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != fields.len() {
            return Err(bad(format!("vertex {row} has {} values", values.len())));
        }
        let mut position = [0.0; 3];
        let mut label = None;
        for (field, raw) in fields.iter().zip(values) {
            let coord = |raw: &str| {
                raw.parse::<f64>()
                    .map_err(|_| bad(format!("vertex {row}: bad coordinate `{raw}`")))
            };
            match field {
                Field::X => position[0] = coord(raw)?,
                Field::Y => position[1] = coord(raw)?,
                Field::Z => position[2] = coord(raw)?,
                Field::Label => {
                    label = raw.parse::<u8>().ok().and_then(Label::from_code);
                    if label.is_none() {
                        return Err(bad(format!("vertex {row}: label `{raw}` not in 0..=2")));
                    }
                }
                Field::Ignored => {}
            }
        }
        points.push(LabeledPoint::new(position, label.expect("checked above")));
    }
    Ok(points)
}

pub fn save_ply(path: impl AsRef<Path>, points: &[LabeledPoint]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(&mut w, points)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<Vec<LabeledPoint>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(BufReader::new(file))
}
