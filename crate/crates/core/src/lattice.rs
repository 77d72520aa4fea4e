//! Analysis mask on a 2-D or 3-D lattice and its face-adjacency graph.

use std::collections::VecDeque;

use crate::error::{BlessError, Result};

/// In-mask sites of a lattice with a dense `0..M` indexing.
///
/// Sites are enumerated row-major with the first axis fastest, so the dense
/// order of in-mask voxels follows `x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticeMask {
    dims: Vec<usize>,
    inside: Vec<bool>,
    dense_of_site: Vec<Option<usize>>,
    site_of_dense: Vec<usize>,
}

impl LatticeMask {
    pub fn new(dims: &[usize], inside: Vec<bool>) -> Result<Self> {
        if !(dims.len() == 2 || dims.len() == 3) {
            return Err(BlessError::Dimension(format!(
                "lattice must be 2-D or 3-D, got {} axes",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(BlessError::Dimension("lattice axes must be positive".into()));
        }
        let total: usize = dims.iter().product();
        if inside.len() != total {
            return Err(BlessError::Dimension(format!(
                "mask has {} flags, lattice has {} sites",
                inside.len(),
                total
            )));
        }
        let mut dense_of_site = vec![None; total];
        let mut site_of_dense = Vec::new();
        for (site, &flag) in inside.iter().enumerate() {
            if flag {
                dense_of_site[site] = Some(site_of_dense.len());
                site_of_dense.push(site);
            }
        }
        Ok(LatticeMask {
            dims: dims.to_vec(),
            inside,
            dense_of_site,
            site_of_dense,
        })
    }

    /// Every site of the lattice inside the mask.
    pub fn full(dims: &[usize]) -> Result<Self> {
        let total = dims.iter().product();
        Self::new(dims, vec![true; total])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_sites(&self) -> usize {
        self.inside.len()
    }

    /// Number of in-mask voxels M.
    pub fn n_voxels(&self) -> usize {
        self.site_of_dense.len()
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn dense_index(&self, site: usize) -> Option<usize> {
        self.dense_of_site.get(site).copied().flatten()
    }

    pub fn site_index(&self, dense: usize) -> usize {
        self.site_of_dense[dense]
    }

    /// Lattice coordinates of a site; the third entry is 0 for 2-D lattices.
    pub fn coords_of_site(&self, site: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [site % nx, (site / nx) % ny, site / (nx * ny)]
    }

    pub fn coords(&self, dense: usize) -> [usize; 3] {
        self.coords_of_site(self.site_of_dense[dense])
    }

    pub fn site_of_coords(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Scatter a dense M-vector back onto the full lattice, `fill` outside the mask.
    pub fn scatter<T: Copy>(&self, dense: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; self.n_sites()];
        for (j, &v) in dense.iter().enumerate() {
            out[self.site_of_dense[j]] = v;
        }
        out
    }

    /// Gather the in-mask entries of a full-lattice vector.
    pub fn gather<T: Copy>(&self, full: &[T]) -> Vec<T> {
        self.site_of_dense.iter().map(|&s| full[s]).collect()
    }
}

/// Face-sharing neighborhood structure over the dense voxel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    color: Vec<u8>,
    n_components: usize,
}

/// Connected-component labeling of an active subset of voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Component id per voxel, `None` for inactive voxels.
    pub labels: Vec<Option<usize>>,
    /// Size of each component, in id order (non-increasing).
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn members(&self, id: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(j, l)| (*l == Some(id)).then_some(j))
            .collect()
    }
}

pub fn build_graph(mask: &LatticeMask) -> Result<NeighborGraph> {
    let m = mask.n_voxels();
    if m == 0 {
        return Err(BlessError::EmptyMask);
    }
    let dims = mask.dims();
    let ndim = dims.len();
    let mut offsets = Vec::with_capacity(m + 1);
    let mut neighbors = Vec::with_capacity(2 * ndim * m);
    let mut color = Vec::with_capacity(m);
    offsets.push(0);
    for j in 0..m {
        let c = mask.coords(j);
        let mut adj = Vec::with_capacity(2 * ndim);
        for axis in 0..ndim {
            if c[axis] > 0 {
                let mut nc = c;
                nc[axis] -= 1;
                if let Some(r) = mask.dense_index(mask.site_of_coords(nc)) {
                    adj.push(r);
                }
            }
            if c[axis] + 1 < dims[axis] {
                let mut nc = c;
                nc[axis] += 1;
                if let Some(r) = mask.dense_index(mask.site_of_coords(nc)) {
                    adj.push(r);
                }
            }
        }
        adj.sort_unstable();
        neighbors.extend_from_slice(&adj);
        offsets.push(neighbors.len());
        color.push(((c[0] + c[1] + c[2]) % 2) as u8);
    }
    let mut graph = NeighborGraph {
        offsets,
        neighbors,
        color,
        n_components: 0,
    };
    graph.n_components = graph.connected_components(&vec![true; m]).sizes.len();
    Ok(graph)
}

impl NeighborGraph {
    pub fn n_voxels(&self) -> usize {
        self.color.len()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[self.offsets[j]..self.offsets[j + 1]]
    }

    /// n(s_j).
    pub fn degree(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }

    /// Checkerboard class (0 or 1); face neighbors always differ.
    pub fn color(&self, j: usize) -> u8 {
        self.color[j]
    }

    /// Voxels of one checkerboard class, ascending.
    pub fn color_class(&self, c: u8) -> Vec<usize> {
        (0..self.n_voxels()).filter(|&j| self.color[j] == c).collect()
    }

    /// Number of connected components G of the whole mask.
    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Each unordered adjacent pair once, as (j, r) with j < r.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_voxels()).flat_map(move |j| {
            self.neighbors(j)
                .iter()
                .filter(move |&&r| r > j)
                .map(move |&r| (j, r))
        })
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Face-connected components of the active voxels. Ids are assigned by
    /// decreasing size, ties broken by the smallest member index.
    pub fn connected_components(&self, active: &[bool]) -> Components {
        let m = self.n_voxels();
        assert_eq!(active.len(), m, "active map must have one flag per voxel");
        let mut raw = vec![usize::MAX; m];
        // (size, smallest member) per raw component; seeds are visited in
        // ascending order so the seed is the smallest member.
        let mut found: Vec<(usize, usize)> = Vec::new();
        let mut queue = VecDeque::new();
        for seed in 0..m {
            if !active[seed] || raw[seed] != usize::MAX {
                continue;
            }
            let id = found.len();
            raw[seed] = id;
            queue.push_back(seed);
            let mut size = 0;
            while let Some(v) = queue.pop_front() {
                size += 1;
                for &r in self.neighbors(v) {
                    if active[r] && raw[r] == usize::MAX {
                        raw[r] = id;
                        queue.push_back(r);
                    }
                }
            }
            found.push((size, seed));
        }
        let mut order: Vec<usize> = (0..found.len()).collect();
        order.sort_by(|&a, &b| found[b].0.cmp(&found[a].0).then(found[a].1.cmp(&found[b].1)));
        let mut rank = vec![0; found.len()];
        for (new_id, &old) in order.iter().enumerate() {
            rank[old] = new_id;
        }
        let labels = raw
            .iter()
            .map(|&r| (r != usize::MAX).then(|| rank[r]))
            .collect();
        let sizes = order.iter().map(|&o| found[o].0).collect();
        Components { labels, sizes }
    }
}
