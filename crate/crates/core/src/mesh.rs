//! 2D triangular meshes with tagged boundary edges and per-triangle subdomain labels.
//!
//! Text format (whitespace separated, 17 significant digits for coordinates):
//!
//! ```text
//! NV NT NB
//! x y            (NV lines)
//! i j k label    (NT lines)
//! i j tag        (NB lines, tag is D or N)
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// Label given to triangles outside every subdomain box.
pub const BULK: &str = "bulk";
/// Region carrying the distributed control (the spill area of the pollution case).
pub const CONTROL_REGION: &str = "control";
/// Region where the state is compared with the desired profile.
pub const OBSERVATION_REGION: &str = "observation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

impl BoundaryTag {
    fn code(self) -> &'static str {
        match self {
            BoundaryTag::Dirichlet => "D",
            BoundaryTag::Neumann => "N",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("degenerate extent: width {width}, height {height}")]
    DegenerateExtent { width: f64, height: f64 },
    #[error("cell counts must be at least 1 (got nx={nx}, ny={ny})")]
    EmptyGrid { nx: usize, ny: usize },
    #[error("subdomain box '{0}' is not contained in the extent")]
    BoxOutsideExtent(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: vertex index {index} out of range (vertex count {count})")]
    VertexIndex {
        line: usize,
        index: usize,
        count: usize,
    },
    #[error("boundary edge ({0}, {1}) listed more than once")]
    DuplicateBoundaryEdge(usize, usize),
    #[error("boundary edge ({0}, {1}) has no tag")]
    UntaggedBoundaryEdge(usize, usize),
    #[error("tagged edge ({0}, {1}) is not on the topological boundary")]
    TaggedInteriorEdge(usize, usize),
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("triangle {0} has negative orientation")]
    NegativeOrientation(usize),
    #[error("label count {labels} does not match triangle count {triangles}")]
    LabelCount { labels: usize, triangles: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }
}

/// Tag assigned to each side of a structured rectangle.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaggingPolicy {
    pub west: BoundaryTag,
    pub south: BoundaryTag,
    pub east: BoundaryTag,
    pub north: BoundaryTag,
}

impl TaggingPolicy {
    pub fn all_dirichlet() -> Self {
        Self {
            west: BoundaryTag::Dirichlet,
            south: BoundaryTag::Dirichlet,
            east: BoundaryTag::Dirichlet,
            north: BoundaryTag::Dirichlet,
        }
    }

    /// Open sea on the west and south sides (plus the south-west corner), coast elsewhere.
    pub fn open_south_west() -> Self {
        Self {
            west: BoundaryTag::Neumann,
            south: BoundaryTag::Neumann,
            east: BoundaryTag::Dirichlet,
            north: BoundaryTag::Dirichlet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubdomainBox {
    pub label: String,
    pub rect: Rect,
}

impl SubdomainBox {
    pub fn new(label: impl Into<String>, rect: Rect) -> Self {
        Self {
            label: label.into(),
            rect,
        }
    }
}

/// Immutable validated triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
    labels: Vec<String>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

impl Mesh {
    /// Builds a mesh, flipping clockwise triangles to counter-clockwise, then validates it.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        mut triangles: Vec<[usize; 3]>,
        boundary: Vec<BoundaryEdge>,
        labels: Vec<String>,
    ) -> Result<Self, MeshError> {
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= vertices.len() {
                    return Err(MeshError::VertexIndex {
                        line: 0,
                        index: v,
                        count: vertices.len(),
                    });
                }
            }
            let a = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if a == 0.0 {
                return Err(MeshError::DegenerateTriangle(t));
            }
            if a < 0.0 {
                tri.swap(1, 2);
            }
        }
        let mesh = Self {
            vertices,
            triangles,
            boundary,
            labels,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Checks orientation, edge manifoldness and that the tagged edges are exactly the boundary.
    pub fn validate(&self) -> Result<(), MeshError> {
        if self.labels.len() != self.triangles.len() {
            return Err(MeshError::LabelCount {
                labels: self.labels.len(),
                triangles: self.triangles.len(),
            });
        }
        let nv = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= nv) {
                return Err(MeshError::VertexIndex {
                    line: 0,
                    index: bad,
                    count: nv,
                });
            }
            let a = self.signed_area(t);
            if a == 0.0 {
                return Err(MeshError::DegenerateTriangle(t));
            }
            if a < 0.0 {
                return Err(MeshError::NegativeOrientation(t));
            }
        }
        let counts = self.edge_counts();
        for (&(a, b), &c) in &counts {
            if c > 2 {
                return Err(MeshError::NonManifoldEdge(a, b));
            }
        }
        let mut tagged: HashMap<(usize, usize), BoundaryTag> = HashMap::new();
        for e in &self.boundary {
            let [a, b] = e.vertices;
            if a >= nv || b >= nv {
                return Err(MeshError::VertexIndex {
                    line: 0,
                    index: a.max(b),
                    count: nv,
                });
            }
            let k = edge_key(a, b);
            if tagged.insert(k, e.tag).is_some() {
                return Err(MeshError::DuplicateBoundaryEdge(k.0, k.1));
            }
            if counts.get(&k) != Some(&1) {
                return Err(MeshError::TaggedInteriorEdge(k.0, k.1));
            }
        }
        let mut untagged: Vec<_> = counts
            .iter()
            .filter(|(k, &c)| c == 1 && !tagged.contains_key(k))
            .map(|(k, _)| *k)
            .collect();
        untagged.sort_unstable();
        if let Some(&(a, b)) = untagged.first() {
            return Err(MeshError::UntaggedBoundaryEdge(a, b));
        }
        Ok(())
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::with_capacity(self.triangles.len() * 2);
        for tri in &self.triangles {
            for k in 0..3 {
                *counts
                    .entry(edge_key(tri[k], tri[(k + 1) % 3]))
                    .or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn area(&self, t: usize) -> f64 {
        self.signed_area(t).abs()
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Total area of the triangles carrying `label`.
    pub fn label_area(&self, label: &str) -> f64 {
        (0..self.triangles.len())
            .filter(|&t| self.labels[t] == label)
            .map(|t| self.area(t))
            .sum()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    pub fn barycenter(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0]
    }

    /// Sorted, deduplicated vertices lying on edges with the given tag.
    pub fn boundary_vertices(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .boundary
            .iter()
            .filter(|e| e.tag == tag)
            .flat_map(|e| e.vertices)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn count_edges(&self, tag: BoundaryTag) -> usize {
        self.boundary.iter().filter(|e| e.tag == tag).count()
    }

    /// Same mesh with triangles (and their labels) reordered by `perm`.
    pub fn permute_triangles(&self, perm: &[usize]) -> Result<Mesh, MeshError> {
        let triangles = perm.iter().map(|&p| self.triangles[p]).collect();
        let labels = perm.iter().map(|&p| self.labels[p].clone()).collect();
        Mesh::new(self.vertices.clone(), triangles, self.boundary.clone(), labels)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} {} {}",
            self.vertices.len(),
            self.triangles.len(),
            self.boundary.len()
        );
        for v in &self.vertices {
            let _ = writeln!(s, "{:.16e} {:.16e}", v[0], v[1]);
        }
        for (tri, label) in self.triangles.iter().zip(&self.labels) {
            let _ = writeln!(s, "{} {} {} {}", tri[0], tri[1], tri[2], label);
        }
        for e in &self.boundary {
            let _ = writeln!(s, "{} {} {}", e.vertices[0], e.vertices[1], e.tag.code());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| MeshError::MalformedHeader("empty file".into()))?;
        let counts: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| MeshError::MalformedHeader(format!("'{header}': {e}")))?;
        let [nv, nt, nb] = counts[..] else {
            return Err(MeshError::MalformedHeader(format!(
                "expected 'NV NT NB', got '{header}'"
            )));
        };

        let mut next = |what: &str| {
            lines.next().ok_or_else(|| MeshError::Parse {
                line: 0,
                msg: format!("unexpected end of file while reading {what}"),
            })
        };
        let parse_err = |line: usize, msg: String| MeshError::Parse { line, msg };

        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = next("vertices")?;
            let xs: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(ln, format!("bad coordinate: {e}")))?;
            if xs.len() != 2 {
                return Err(parse_err(ln, "expected 'x y'".into()));
            }
            vertices.push([xs[0], xs[1]]);
        }
        let check = |ln: usize, i: usize| {
            if i >= nv {
                Err(MeshError::VertexIndex {
                    line: ln,
                    index: i,
                    count: nv,
                })
            } else {
                Ok(i)
            }
        };
        let mut triangles = Vec::with_capacity(nt);
        let mut labels = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("triangles")?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(parse_err(ln, "expected 'i j k label'".into()));
            }
            let mut tri = [0usize; 3];
            for k in 0..3 {
                let i = toks[k]
                    .parse::<usize>()
                    .map_err(|e| parse_err(ln, format!("bad vertex index: {e}")))?;
                tri[k] = check(ln, i)?;
            }
            triangles.push(tri);
            labels.push(toks[3].to_string());
        }
        let mut boundary = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, l) = next("boundary edges")?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(parse_err(ln, "expected 'i j tag'".into()));
            }
            let a = check(
                ln,
                toks[0]
                    .parse()
                    .map_err(|e| parse_err(ln, format!("bad vertex index: {e}")))?,
            )?;
            let b = check(
                ln,
                toks[1]
                    .parse()
                    .map_err(|e| parse_err(ln, format!("bad vertex index: {e}")))?,
            )?;
            let tag = match toks[2] {
                "D" => BoundaryTag::Dirichlet,
                "N" => BoundaryTag::Neumann,
                other => return Err(parse_err(ln, format!("unknown boundary tag '{other}'"))),
            };
            boundary.push(BoundaryEdge {
                vertices: [a, b],
                tag,
            });
        }
        if let Some((ln, _)) = lines.next() {
            return Err(parse_err(ln, "trailing content after boundary edges".into()));
        }
        Mesh::new(vertices, triangles, boundary, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Structured `nx × ny` triangulation of `extent`; each cell is split along its
/// lower-left to upper-right diagonal.
///
/// Vertex `(i, j)` has index `j * (nx + 1) + i`. A triangle gets the label of the
/// first box containing its barycenter, else [`BULK`].
pub fn generate_structured_rectangle(
    nx: usize,
    ny: usize,
    extent: Rect,
    tagging: &TaggingPolicy,
    subdomains: &[SubdomainBox],
) -> Result<Mesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::EmptyGrid { nx, ny });
    }
    if !(extent.width() > 0.0 && extent.height() > 0.0) {
        return Err(MeshError::DegenerateExtent {
            width: extent.width(),
            height: extent.height(),
        });
    }
    for b in subdomains {
        if !extent.contains_rect(&b.rect) {
            return Err(MeshError::BoxOutsideExtent(b.label.clone()));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        // Pin the last row/column to the extent so no rounding drift appears there.
        let y = if j == ny {
            extent.y1
        } else {
            extent.y0 + extent.height() * j as f64 / ny as f64
        };
        for i in 0..=nx {
            let x = if i == nx {
                extent.x1
            } else {
                extent.x0 + extent.width() * i as f64 / nx as f64
            };
            vertices.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let labels = triangles
        .iter()
        .map(|t| {
            let c = [
                (vertices[t[0]][0] + vertices[t[1]][0] + vertices[t[2]][0]) / 3.0,
                (vertices[t[0]][1] + vertices[t[1]][1] + vertices[t[2]][1]) / 3.0,
            ];
            subdomains
                .iter()
                .find(|b| b.rect.contains(c))
                .map(|b| b.label.clone())
                .unwrap_or_else(|| BULK.to_string())
        })
        .collect();
    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary.push(BoundaryEdge {
            vertices: [idx(i, 0), idx(i + 1, 0)],
            tag: tagging.south,
        });
    }
    for j in 0..ny {
        boundary.push(BoundaryEdge {
            vertices: [idx(nx, j), idx(nx, j + 1)],
            tag: tagging.east,
        });
    }
    for i in (0..nx).rev() {
        boundary.push(BoundaryEdge {
            vertices: [idx(i + 1, ny), idx(i, ny)],
            tag: tagging.north,
        });
    }
    for j in (0..ny).rev() {
        boundary.push(BoundaryEdge {
            vertices: [idx(0, j + 1), idx(0, j)],
            tag: tagging.west,
        });
    }
    Mesh::new(vertices, triangles, boundary, labels)
}
