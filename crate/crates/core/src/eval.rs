//! Test-split RMSE and the request-replay simulator for hit rate and delay.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::cache::{ContentCatalog, PlacementPlan};
use crate::data::{RatingMatrix, ShardManifest};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Root mean squared error of `pred` over the observed entries of `truth`.
/// `pred` must be indexed by `truth`'s user and content axes.
pub fn rmse(pred: &Matrix, truth: &RatingMatrix) -> Result<f64> {
    if pred.shape() != (truth.n_users(), truth.n_contents()) {
        return Err(Error::Shape {
            op: "rmse",
            left: pred.shape(),
            right: (truth.n_users(), truth.n_contents()),
        });
    }
    if truth.is_empty() {
        return Err(Error::Degenerate(
            "test split has no observed entries".into(),
        ));
    }
    let sq: f64 = truth
        .entries()
        .iter()
        .map(|e| {
            let r = pred[(e.row, e.col)] - e.value;
            r * r
        })
        .sum();
    Ok((sq / truth.len() as f64).sqrt())
}

pub const MBPS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub men_count: usize,
    /// MEN ↔ CS link, bits per second.
    pub backhaul_bps: f64,
    /// MEN ↔ MEN link, bits per second.
    pub men_bps: f64,
    /// MEN ↔ user link, bits per second.
    pub user_bps: f64,
    /// Directly connected MEN pairs, stored as `(low, high)` ids.
    pub links: BTreeSet<(usize, usize)>,
}

impl NetworkTopology {
    /// 60 Mbps backhaul, 100 Mbps elsewhere, every MEN pair connected.
    pub fn full_mesh(men_count: usize) -> Self {
        let links = (1..=men_count)
            .flat_map(|a| ((a + 1)..=men_count).map(move |b| (a, b)))
            .collect();
        Self {
            men_count,
            backhaul_bps: 60.0 * MBPS,
            men_bps: 100.0 * MBPS,
            user_bps: 100.0 * MBPS,
            links,
        }
    }

    /// Same bandwidths with no MEN-to-MEN links.
    pub fn isolated(men_count: usize) -> Self {
        Self {
            links: BTreeSet::new(),
            ..Self::full_mesh(men_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bw) in [
            ("backhaul", self.backhaul_bps),
            ("men", self.men_bps),
            ("user", self.user_bps),
        ] {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} bandwidth must be > 0, got {bw}"
                )));
            }
        }
        for &(a, b) in &self.links {
            if a == b || a == 0 || b == 0 || a > self.men_count || b > self.men_count {
                return Err(Error::Config(format!("invalid MEN link ({a}, {b})")));
            }
        }
        Ok(())
    }

    /// Links are symmetric.
    pub fn connected(&self, a: usize, b: usize) -> bool {
        self.links.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, men: usize) -> Vec<usize> {
        (1..=self.men_count)
            .filter(|&m| m != men && self.connected(men, m))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Count neighbor fetches as hits.
    pub count_neighbor_hits: bool,
    /// Local hits cost nothing instead of the user-link transfer.
    pub zero_local_delay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Request {
    pub user: u32,
    pub content: u32,
    /// Home MEN of the requesting user.
    pub men: usize,
}

/// One request per observed test entry, ordered by `(user, content)`.
pub fn build_request_trace(test: &RatingMatrix, manifest: &ShardManifest) -> Result<Vec<Request>> {
    let home = manifest.home_map();
    let users = test.users().ids();
    let contents = test.contents().ids();
    let mut trace: Vec<Request> = test
        .entries()
        .iter()
        .map(|e| {
            let user = users[e.row];
            let men = *home
                .get(&user)
                .ok_or_else(|| Error::Contract(format!("user {user} has no home MEN")))?;
            Ok(Request {
                user,
                content: contents[e.col],
                men,
            })
        })
        .collect::<Result<_>>()?;
    trace.sort();
    Ok(trace)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub requests: usize,
    pub local_hits: usize,
    pub neighbor_hits: usize,
    pub cs_fetches: usize,
    pub hit_rate: f64,
    /// Seconds.
    pub avg_delay: f64,
}

/// Serves every request against a static placement.
///
/// Local hit: `size / bw_user`. Neighbor hit: `size / bw_men + size / bw_user`.
/// Otherwise the CS: `size / bw_backhaul + size / bw_user`.
pub fn replay(
    plan: &PlacementPlan,
    topo: &NetworkTopology,
    trace: &[Request],
    catalog: &ContentCatalog,
    opts: ReplayOptions,
) -> Result<ReplayResult> {
    topo.validate()?;
    let bits = catalog.content_size as f64 * 8.0;
    let user_leg = if opts.zero_local_delay {
        0.0
    } else {
        bits / topo.user_bps
    };
    let delivery = bits / topo.user_bps;
    let neighbor_delay = bits / topo.men_bps + delivery;
    let cs_delay = bits / topo.backhaul_bps + delivery;

    let cached: Vec<HashSet<u32>> = (0..=topo.men_count)
        .map(|m| {
            plan.get(m)
                .map(|p| p.contents.iter().copied().collect())
                .unwrap_or_default()
        })
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..=topo.men_count).map(|m| topo.neighbors(m)).collect();

    let mut out = ReplayResult {
        requests: trace.len(),
        ..Default::default()
    };
    let mut total_delay = 0.0;
    for req in trace {
        if !catalog.contains(req.content) {
            return Err(Error::Contract(format!(
                "content {} is not in the catalog",
                req.content
            )));
        }
        if req.men == 0 || req.men > topo.men_count {
            return Err(Error::Contract(format!(
                "request from unknown MEN {}",
                req.men
            )));
        }
        if cached[req.men].contains(&req.content) {
            out.local_hits += 1;
            total_delay += user_leg;
        } else if neighbors[req.men]
            .iter()
            .any(|&n| cached[n].contains(&req.content))
        {
            out.neighbor_hits += 1;
            total_delay += neighbor_delay;
        } else {
            out.cs_fetches += 1;
            total_delay += cs_delay;
        }
    }
    if out.requests > 0 {
        let hits = if opts.count_neighbor_hits {
            out.local_hits + out.neighbor_hits
        } else {
            out.local_hits
        };
        out.hit_rate = hits as f64 / out.requests as f64;
        out.avg_delay = total_delay / out.requests as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{MenPlacement, DEFAULT_CONTENT_SIZE};
    use crate::data::RatingEvent;

    fn truth(values: &[(u32, u32, f64)]) -> RatingMatrix {
        let events: Vec<_> = values
            .iter()
            .map(|&(user_id, content_id, value)| RatingEvent {
                user_id,
                content_id,
                value,
                timestamp: 0,
            })
            .collect();
        RatingMatrix::from_events(&events).unwrap()
    }

    fn plan(entries: &[(usize, &[u32])]) -> PlacementPlan {
        PlacementPlan(
            entries
                .iter()
                .map(|&(m, c)| {
                    (
                        m,
                        MenPlacement {
                            capacity_bytes: c.len() as u64 * DEFAULT_CONTENT_SIZE,
                            contents: c.to_vec(),
                        },
                    )
                })
                .collect(),
        )
    }

    fn catalog() -> ContentCatalog {
        ContentCatalog::new(vec![1, 2, 3], DEFAULT_CONTENT_SIZE).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let t = truth(&[(1, 1, 4.0), (2, 2, 1.0)]);
        assert_eq!(rmse(&t.dense(), &t).unwrap(), 0.0);
        // residuals 3 and 4 → √12.5
        let pred = Matrix::from_rows(&[[7.0, 0.0], [0.0, 5.0]]);
        assert!((rmse(&pred, &t).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmse_matches_direct_summation() {
        let t = truth(&[
            (1, 1, 4.0),
            (1, 3, 2.0),
            (2, 2, 5.0),
            (3, 1, 1.0),
            (3, 3, 3.0),
        ]);
        let pred = Matrix::from_rows(&[[3.7, 9.0, 2.2], [0.0, 4.1, 0.0], [1.9, 0.0, 3.05]]);
        let direct =
            ((0.3f64.powi(2) + 0.2f64.powi(2) + 0.9f64.powi(2) + 0.9f64.powi(2) + 0.05f64.powi(2))
                / 5.0)
                .sqrt();
        assert!((rmse(&pred, &t).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn rmse_empty_truth_is_degenerate() {
        let t = truth(&[(1, 1, 4.0)]);
        let empty = RatingMatrix::with_axes(&[], t.users().clone(), t.contents().clone()).unwrap();
        assert!(matches!(
            rmse(&Matrix::zeros(1, 1), &empty),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn local_hit_delay_is_user_leg() {
        let topo = NetworkTopology::full_mesh(1);
        let trace = [Request {
            user: 1,
            content: 1,
            men: 1,
        }];
        let r = replay(
            &plan(&[(1, &[1])]),
            &topo,
            &trace,
            &catalog(),
            ReplayOptions::default(),
        )
        .unwrap();
        assert_eq!(r.local_hits, 1);
        assert_eq!(r.hit_rate, 1.0);
        // 1.6e9 bits over 100 Mbps
        assert!((r.avg_delay - 16.0).abs() < 1e-12);

        let zero = ReplayOptions {
            zero_local_delay: true,
            ..Default::default()
        };
        let r = replay(&plan(&[(1, &[1])]), &topo, &trace, &catalog(), zero).unwrap();
        assert_eq!(r.avg_delay, 0.0);
    }

    #[test]
    fn cs_fetch_adds_backhaul_leg() {
        let topo = NetworkTopology::full_mesh(1);
        let trace = [Request {
            user: 1,
            content: 2,
            men: 1,
        }];
        let r = replay(
            &plan(&[(1, &[1])]),
            &topo,
            &trace,
            &catalog(),
            ReplayOptions::default(),
        )
        .unwrap();
        assert_eq!(r.cs_fetches, 1);
        assert!((r.avg_delay - (16.0 + 1.6e9 / 6e7)).abs() < 1e-9);
        assert!((1.6e9 / 6e7 - 26.666_666_666_666_668f64).abs() < 1e-9);
    }

    #[test]
    fn neighbor_hits_are_reported_separately() {
        let trace = [
            Request {
                user: 1,
                content: 2,
                men: 1,
            },
            Request {
                user: 1,
                content: 1,
                men: 1,
            },
        ];
        let p = plan(&[(1, &[1]), (2, &[2])]);
        let mesh = NetworkTopology::full_mesh(2);
        let r = replay(&p, &mesh, &trace, &catalog(), ReplayOptions::default()).unwrap();
        assert_eq!((r.local_hits, r.neighbor_hits, r.cs_fetches), (1, 1, 0));
        assert_eq!(r.hit_rate, 0.5);
        assert!((r.avg_delay - (16.0 + 32.0) / 2.0).abs() < 1e-12);

        let both = ReplayOptions {
            count_neighbor_hits: true,
            ..Default::default()
        };
        assert_eq!(
            replay(&p, &mesh, &trace, &catalog(), both)
                .unwrap()
                .hit_rate,
            1.0
        );

        let alone = replay(
            &p,
            &NetworkTopology::isolated(2),
            &trace,
            &catalog(),
            ReplayOptions::default(),
        )
        .unwrap();
        assert_eq!((alone.neighbor_hits, alone.cs_fetches), (0, 1));
    }

    #[test]
    fn empty_plan_sends_everything_to_cs() {
        let trace = [
            Request {
                user: 1,
                content: 1,
                men: 1,
            },
            Request {
                user: 2,
                content: 3,
                men: 1,
            },
        ];
        let r = replay(
            &PlacementPlan::default(),
            &NetworkTopology::full_mesh(1),
            &trace,
            &catalog(),
            ReplayOptions::default(),
        )
        .unwrap();
        assert_eq!(r.hit_rate, 0.0);
        assert_eq!(r.cs_fetches, 2);
    }

    #[test]
    fn unknown_content_is_rejected() {
        let trace = [Request {
            user: 1,
            content: 99,
            men: 1,
        }];
        let r = replay(
            &PlacementPlan::default(),
            &NetworkTopology::full_mesh(1),
            &trace,
            &catalog(),
            ReplayOptions::default(),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn trace_is_sorted_and_mapped() {
        let t = truth(&[(2, 1, 3.0), (1, 3, 4.0)]);
        let manifest = ShardManifest([(1, vec![1]), (2, vec![2])].into_iter().collect());
        let trace = build_request_trace(&t, &manifest).unwrap();
        assert_eq!(
            trace,
            vec![
                Request {
                    user: 1,
                    content: 3,
                    men: 1
                },
                Request {
                    user: 2,
                    content: 1,
                    men: 2
                }
            ]
        );
        let empty = RatingMatrix::with_axes(&[], t.users().clone(), t.contents().clone()).unwrap();
        assert!(build_request_trace(&empty, &manifest).unwrap().is_empty());
    }

    #[test]
    fn topology_validation() {
        let mut topo = NetworkTopology::full_mesh(3);
        assert!(topo.validate().is_ok());
        assert!(topo.connected(3, 1));
        topo.backhaul_bps = 0.0;
        assert!(topo.validate().is_err());
        let mut topo = NetworkTopology::isolated(2);
        topo.links.insert((1, 5));
        assert!(topo.validate().is_err());
    }
}
