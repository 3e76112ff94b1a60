//! Density-based clustering of a window's event pixels, run separately per
//! polarity, with median cluster centers.

use nalgebra::Vector2;
use std::collections::HashMap;

use crate::event::EventWindow;
use crate::geometry::lower_median;

/// Point label produced by [`dbscan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Noise,
    Cluster(usize),
}

/// A polarity-pure event cluster with a median center.
#[derive(Debug, Clone)]
pub struct Cluster {
    /// Indices into the window's event list.
    pub member_indices: Vec<usize>,
    /// Coordinate-wise lower median of the member pixel locations.
    pub center: Vector2<f64>,
    /// +1 or -1; all members share it.
    pub polarity: i8,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.member_indices.len()
    }
}

/// Grid-bucket spatial index with cell size `eps`; neighbor queries scan the
/// 3x3 cell ring.
struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn build(points: &[Vector2<f64>], eps: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = ((p.x / eps).floor() as i64, (p.y / eps).floor() as i64);
            buckets.entry(key).or_default().push(i);
        }
        Self { cell: eps, buckets }
    }

    fn neighbors(&self, points: &[Vector2<f64>], i: usize, eps: f64, out: &mut Vec<usize>) {
        out.clear();
        let p = points[i];
        let cx = (p.x / self.cell).floor() as i64;
        let cy = (p.y / self.cell).floor() as i64;
        let eps2 = eps * eps;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy)) {
                    for &j in bucket {
                        if (points[j] - p).norm_squared() <= eps2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
    }
}

/// DBSCAN over 2-D points: core points have at least `min_pts` neighbors
/// (self included) within `eps`; clusters are maximal density-connected sets.
///
/// Labels are deterministic for a given input order: clusters are numbered by
/// the smallest index of a core point they contain, and a border point
/// reachable from several clusters goes to the earliest-created one.
pub fn dbscan(points: &[Vector2<f64>], eps: f64, min_pts: usize) -> Vec<Label> {
    assert!(eps > 0.0 && min_pts >= 1);
    let n = points.len();
    let mut labels = vec![Label::Noise; n];
    let mut visited = vec![false; n];
    if n == 0 {
        return labels;
    }
    let index = GridIndex::build(points, eps);
    let mut neigh = Vec::new();
    let mut cluster_id = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        index.neighbors(points, i, eps, &mut neigh);
        if neigh.len() < min_pts {
            continue; // stays noise unless claimed as border later
        }
        visited[i] = true;
        labels[i] = Label::Cluster(cluster_id);
        let mut queue: Vec<usize> = neigh.iter().copied().filter(|&j| j != i).collect();
        let mut qi = 0;
        while qi < queue.len() {
            let j = queue[qi];
            qi += 1;
            if labels[j] == Label::Noise {
                labels[j] = Label::Cluster(cluster_id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            index.neighbors(points, j, eps, &mut neigh);
            if neigh.len() >= min_pts {
                for &k in &neigh {
                    if !visited[k] || labels[k] == Label::Noise {
                        queue.push(k);
                    }
                }
            }
        }
        cluster_id += 1;
    }
    labels
}

fn median_center(points: &[Vector2<f64>], members: &[usize]) -> Vector2<f64> {
    let mut xs: Vec<f64> = members.iter().map(|&i| points[i].x).collect();
    let mut ys: Vec<f64> = members.iter().map(|&i| points[i].y).collect();
    Vector2::new(lower_median(&mut xs), lower_median(&mut ys))
}

/// Cluster one window per polarity, rejecting clusters below `min_cluster_size`.
pub fn extract_clusters(
    window: &EventWindow,
    eps: f64,
    min_pts: usize,
    min_cluster_size: usize,
) -> (Vec<Cluster>, Vec<Cluster>) {
    let mut result = [Vec::new(), Vec::new()];
    for (slot, polarity) in [(0usize, 1i8), (1usize, -1i8)] {
        let indices: Vec<usize> = window
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.polarity == polarity)
            .map(|(i, _)| i)
            .collect();
        let points: Vec<Vector2<f64>> = indices
            .iter()
            .map(|&i| Vector2::new(window.events[i].x, window.events[i].y))
            .collect();
        let labels = dbscan(&points, eps, min_pts);
        let n_clusters = labels
            .iter()
            .filter_map(|l| match l {
                Label::Cluster(id) => Some(id + 1),
                Label::Noise => None,
            })
            .max()
            .unwrap_or(0);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
        for (local, label) in labels.iter().enumerate() {
            if let Label::Cluster(id) = label {
                members[*id].push(local);
            }
        }
        result[slot] = members
            .into_iter()
            .filter(|m| m.len() >= min_cluster_size)
            .map(|m| {
                let center = median_center(&points, &m);
                Cluster {
                    member_indices: m.iter().map(|&local| indices[local]).collect(),
                    center,
                    polarity,
                }
            })
            .collect();
    }
    let [pos, neg] = result;
    (pos, neg)
}
