//! Static 3-D k-d tree with exact nearest-neighbor queries.

use nalgebra::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Ties on distance resolve to the lowest point index.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<Point3<f64>>,
    /// Point indices permuted so that every node owns a contiguous range.
    order: Vec<usize>,
    root: Node,
}

impl KdTree {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = build(&points, &mut order, 0);
        KdTree {
            points,
            order,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Point3<f64> {
        &self.points[index]
    }

    /// `(index, squared distance)` of the nearest point, or `None` when empty.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, q, &mut best);
        Some(best)
    }

    fn search(&self, node: &Node, q: &Point3<f64>, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (first, second) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(first, q, best);
                // Equality is still explored so a lower-index tie can win.
                if diff * diff <= best.1 {
                    self.search(second, q, best);
                }
            }
        }
    }
}

fn build(points: &[Point3<f64>], order: &mut [usize], offset: usize) -> Node {
    if order.len() <= LEAF_SIZE {
        return Node::Leaf {
            start: offset,
            end: offset + order.len(),
        };
    }
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let extent = hi - lo;
    let axis = extent.imax();
    if extent[axis] == 0.0 {
        return Node::Leaf {
            start: offset,
            end: offset + order.len(),
        };
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    let (left, right) = order.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, left, offset)),
        right: Box::new(build(points, right, offset + mid)),
    }
}
