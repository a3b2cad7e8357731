//! OFF and ASCII PLY readers and writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MeshError, ParseError, TriMesh};
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    PlyAscii,
}

impl MeshFormat {
    /// Guesses the format from a file extension (`.off` or `.ply`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path
            .extension()?
            .to_str()?
            .to_ascii_lowercase()
            .as_str()
        {
            "off" => Some(Self::Off),
            "ply" => Some(Self::PlyAscii),
            _ => None,
        }
    }
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriMesh, MeshError> {
    let text = fs::read_to_string(path)?;
    match format {
        MeshFormat::Off => parse_off(&text),
        MeshFormat::PlyAscii => parse_ply(&text),
    }
}

pub fn save_mesh(mesh: &TriMesh, path: &Path, format: MeshFormat) -> Result<(), MeshError> {
    let text = match format {
        MeshFormat::Off => write_off(mesh),
        MeshFormat::PlyAscii => write_ply(mesh),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T, ParseError> {
    tok.parse()
        .map_err(|_| ParseError::new(line, format!("{what}: cannot parse `{tok}`")))
}

fn parse_vertex(line: usize, l: &str, record: usize) -> Result<Vec3, ParseError> {
    let what = format!("vertex record {record}");
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() < 3 {
        return Err(ParseError::new(
            line,
            format!("{what}: expected 3 coordinates, found {}", toks.len()),
        ));
    }
    Ok([
        parse_num(toks[0], line, &what)?,
        parse_num(toks[1], line, &what)?,
        parse_num(toks[2], line, &what)?,
    ])
}

fn parse_face(line: usize, l: &str, record: usize) -> Result<[usize; 3], ParseError> {
    let what = format!("face record {record}");
    let toks: Vec<&str> = l.split_whitespace().collect();
    let count: usize = match toks.first() {
        Some(t) => parse_num(t, line, &what)?,
        None => return Err(ParseError::new(line, format!("{what}: empty"))),
    };
    if count != 3 {
        return Err(ParseError::new(
            line,
            format!("{what}: only triangles are supported, found {count}-gon"),
        ));
    }
    if toks.len() < 4 {
        return Err(ParseError::new(
            line,
            format!("{what}: expected 3 indices, found {}", toks.len() - 1),
        ));
    }
    Ok([
        parse_num(toks[1], line, &what)?,
        parse_num(toks[2], line, &what)?,
        parse_num(toks[3], line, &what)?,
    ])
}

pub fn parse_off(text: &str) -> Result<TriMesh, MeshError> {
    let mut lines = content_lines(text);
    let last_line = text.lines().count();
    match lines.next() {
        Some((_, "OFF")) => {}
        Some((n, other)) => {
            return Err(ParseError::new(n, format!("expected `OFF` header, found `{other}`")).into())
        }
        None => return Err(ParseError::new(1, "empty file").into()),
    }
    let (n, counts) = lines
        .next()
        .ok_or_else(|| ParseError::new(last_line, "missing counts line"))?;
    let toks: Vec<&str> = counts.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(ParseError::new(n, "counts line needs `n_vertices n_faces [n_edges]`").into());
    }
    let n_vertices: usize = parse_num(toks[0], n, "vertex count")?;
    let n_faces: usize = parse_num(toks[1], n, "face count")?;

    let mut vertices = Vec::with_capacity(n_vertices);
    for record in 1..=n_vertices {
        let (ln, l) = lines.next().ok_or_else(|| {
            ParseError::new(
                last_line,
                format!("vertex record {record}: expected {n_vertices} vertices, file ended"),
            )
        })?;
        vertices.push(parse_vertex(ln, l, record)?);
    }
    let mut faces = Vec::with_capacity(n_faces);
    for record in 1..=n_faces {
        let (ln, l) = lines.next().ok_or_else(|| {
            ParseError::new(
                last_line,
                format!("face record {record}: expected {n_faces} faces, file ended"),
            )
        })?;
        faces.push(parse_face(ln, l, record)?);
    }
    if let Some((ln, extra)) = lines.next() {
        return Err(ParseError::new(ln, format!("unexpected trailing content `{extra}`")).into());
    }
    Ok(TriMesh::new(vertices, faces)?)
}

/// Writes the mesh as OFF. Coordinates use the shortest representation that
/// parses back to the same `f64`.
pub fn write_off(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF");
    let _ = writeln!(
        s,
        "{} {} {}",
        mesh.n_vertices(),
        mesh.n_faces(),
        mesh.edges().len()
    );
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn write_ply(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0");
    let _ = writeln!(s, "element vertex {}", mesh.n_vertices());
    let _ = writeln!(s, "property double x\nproperty double y\nproperty double z");
    let _ = writeln!(s, "element face {}", mesh.n_faces());
    let _ = writeln!(s, "property list uchar int vertex_indices\nend_header");
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn parse_ply(text: &str) -> Result<TriMesh, MeshError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let last_line = text.lines().count();
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, other)) => {
            return Err(ParseError::new(n, format!("expected `ply` magic, found `{other}`")).into())
        }
        None => return Err(ParseError::new(1, "empty file").into()),
    }

    #[derive(PartialEq)]
    enum Section {
        None,
        Vertex,
        Face,
    }
    let mut section = Section::None;
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut saw_format = false;
    loop {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| ParseError::new(last_line, "missing `end_header`"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(
                    ParseError::new(ln, format!("unsupported PLY format `{other}`")).into(),
                )
            }
            ["element", "vertex", n] => {
                n_vertices = Some(parse_num::<usize>(n, ln, "vertex count")?);
                section = Section::Vertex;
            }
            ["element", "face", n] => {
                n_faces = Some(parse_num::<usize>(n, ln, "face count")?);
                section = Section::Face;
            }
            ["element", other, ..] => {
                return Err(ParseError::new(ln, format!("unsupported element `{other}`")).into())
            }
            ["property", "list", _, _, name] => {
                if section != Section::Face || !matches!(*name, "vertex_indices" | "vertex_index")
                {
                    return Err(
                        ParseError::new(ln, format!("unexpected list property `{name}`")).into(),
                    );
                }
            }
            ["property", _, name] if section == Section::Vertex => {
                vertex_props.push(name.to_string())
            }
            _ => return Err(ParseError::new(ln, format!("unrecognized header line `{l}`")).into()),
        }
    }
    if !saw_format {
        return Err(ParseError::new(1, "missing `format ascii 1.0` line").into());
    }
    let n_vertices = n_vertices.ok_or_else(|| ParseError::new(1, "missing `element vertex`"))?;
    let n_faces = n_faces.ok_or_else(|| ParseError::new(1, "missing `element face`"))?;
    let axis = |name: &str| {
        vertex_props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| ParseError::new(1, format!("vertex property `{name}` missing")))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut vertices = Vec::with_capacity(n_vertices);
    for record in 1..=n_vertices {
        let (ln, l) = body.next().ok_or_else(|| {
            ParseError::new(
                last_line,
                format!("vertex record {record}: expected {n_vertices} vertices, file ended"),
            )
        })?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != vertex_props.len() {
            return Err(ParseError::new(
                ln,
                format!(
                    "vertex record {record}: expected {} values, found {}",
                    vertex_props.len(),
                    toks.len()
                ),
            )
            .into());
        }
        let what = format!("vertex record {record}");
        vertices.push([
            parse_num(toks[ix], ln, &what)?,
            parse_num(toks[iy], ln, &what)?,
            parse_num(toks[iz], ln, &what)?,
        ]);
    }
    let mut faces = Vec::with_capacity(n_faces);
    for record in 1..=n_faces {
        let (ln, l) = body.next().ok_or_else(|| {
            ParseError::new(
                last_line,
                format!("face record {record}: expected {n_faces} faces, file ended"),
            )
        })?;
        faces.push(parse_face(ln, l, record)?);
    }
    if let Some((ln, extra)) = body.next() {
        return Err(ParseError::new(ln, format!("unexpected trailing content `{extra}`")).into());
    }
    Ok(TriMesh::new(vertices, faces)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::tetrahedron;
    use crate::mesh::ValidationError;

    const TET_OFF: &str = "OFF\n# regular tetrahedron\n4 4 6\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n";

    #[test]
    fn parses_tetrahedron_off() {
        let m = parse_off(TET_OFF).unwrap();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_faces(), 4);
        assert_eq!(m, tetrahedron());
    }

    #[test]
    fn missing_vertex_record_is_reported() {
        let text = "OFF\n4 4 6\n1 1 1\n1 -1 -1\n-1 1 -1\n";
        match parse_off(text).unwrap_err() {
            MeshError::Parse(e) => assert!(e.message.contains("vertex record 4"), "{e}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_vertex_line_is_reported() {
        // Face lines get consumed as vertices when a vertex is missing.
        let text = "OFF\n4 1 0\n1 1 1\n1 -1 -1\n-1 1 -1\n3 0\n";
        let err = parse_off(text).unwrap_err();
        assert!(err.to_string().contains("vertex record 4"), "{err}");
    }

    #[test]
    fn two_components_rejected_from_file() {
        let text = "OFF\n8 8 0\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n11 1 1\n11 -1 -1\n9 1 -1\n9 -1 1\n\
                    3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n3 4 5 6\n3 4 7 5\n3 4 6 7\n3 5 7 6\n";
        match parse_off(text).unwrap_err() {
            MeshError::Validation(ValidationError::Disconnected { components, .. }) => {
                assert_eq!(components, 2)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_header_and_polygons() {
        assert!(matches!(parse_off("COFF\n0 0 0\n"), Err(MeshError::Parse(_))));
        let quad = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        assert!(parse_off(quad).unwrap_err().to_string().contains("face record 1"));
    }

    #[test]
    fn ply_round_trip() {
        let m = tetrahedron();
        let back = parse_ply(&write_ply(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ply_with_extra_vertex_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\n\
                    property float z\nproperty float confidence\nelement face 1\n\
                    property list uchar int vertex_indices\nend_header\n0 0 0 1\n1 0 0 1\n0 1 0 0.5\n3 0 1 2\n";
        let m = parse_ply(text).unwrap();
        assert_eq!(m.vertices()[2], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn binary_ply_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        let err = parse_ply(text).unwrap_err();
        assert!(err.to_string().contains("unsupported PLY format"));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(MeshFormat::from_path(Path::new("a/b.OFF")), Some(MeshFormat::Off));
        assert_eq!(MeshFormat::from_path(Path::new("x.ply")), Some(MeshFormat::PlyAscii));
        assert_eq!(MeshFormat::from_path(Path::new("x.stl")), None);
    }
}
