//! Exhaustive instance search and evaluation metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::descriptor::{Descriptor, DescriptorStore};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::region::{iou, BBox};

/// Finalized instance descriptors grouped by image.
#[derive(Debug, Clone)]
pub struct InstanceIndex {
    records: Vec<Descriptor>,
    roster: Vec<String>,
    dim: usize,
}

impl InstanceIndex {
    pub fn new(records: Vec<Descriptor>, roster: impl IntoIterator<Item = String>) -> Result<Self> {
        let roster: BTreeSet<String> = roster.into_iter().collect();
        let dim = records.first().map_or(0, |r| r.vector.len());
        for r in &records {
            if !roster.contains(&r.image_id) {
                return Err(Error::Data(format!("record of unknown image `{}`", r.image_id)));
            }
            if r.vector.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            if !r.normalized {
                return Err(Error::Data(format!(
                    "record {}/{} is not finalized",
                    r.image_id, r.region_id
                )));
            }
        }
        Ok(InstanceIndex {
            records,
            roster: roster.into_iter().collect(),
            dim,
        })
    }

    /// Index over a finalized store; the roster is every image with a record.
    pub fn from_store(store: DescriptorStore) -> Result<Self> {
        let roster: Vec<String> = store.records.iter().map(|r| r.image_id.clone()).collect();
        Self::new(store.records, roster)
    }

    pub fn records(&self) -> &[Descriptor] {
        &self.records
    }

    pub fn roster(&self) -> &[String] {
        &self.roster
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub image_id: String,
    pub score: f32,
    pub region_id: u32,
    /// Best-matching region: the localization evidence.
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.image_id.as_str())
    }
}

/// Scores each image by its best instance (cosine on unit vectors) and ranks
/// images by score, ties by image id. Within an image, ties go to the lower
/// region id.
pub fn search(query_id: &str, query: &[f32], index: &InstanceIndex) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::Empty("index has no records".into()));
    }
    if query.len() != index.dim {
        return Err(Error::Dimension {
            expected: index.dim,
            got: query.len(),
        });
    }
    let mut best: BTreeMap<&str, (f64, u32, BBox)> = BTreeMap::new();
    for r in &index.records {
        let s = dot(query, &r.vector);
        best.entry(&r.image_id)
            .and_modify(|b| {
                if s > b.0 || (s == b.0 && r.region_id < b.1) {
                    *b = (s, r.region_id, r.bbox);
                }
            })
            .or_insert((s, r.region_id, r.bbox));
    }
    let mut hits: Vec<(f64, Hit)> = best
        .into_iter()
        .map(|(id, (s, region_id, bbox))| {
            (
                s,
                Hit {
                    image_id: id.to_string(),
                    score: s as f32,
                    region_id,
                    bbox,
                },
            )
        })
        .collect();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.image_id.cmp(&b.1.image_id)));
    Ok(RankedList {
        query_id: query_id.to_string(),
        hits: hits.into_iter().map(|(_, h)| h).collect(),
    })
}

/// Ranks whole-image vectors (e.g. VLAD) by cosine against `query`.
pub fn search_images(query_id: &str, query: &[f32], images: &[(String, Vec<f32>)]) -> Result<RankedList> {
    if images.is_empty() {
        return Err(Error::Empty("no image vectors".into()));
    }
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(images.len());
    for (id, v) in images {
        if v.len() != query.len() {
            return Err(Error::Dimension {
                expected: query.len(),
                got: v.len(),
            });
        }
        scored.push((dot(query, v), id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(RankedList {
        query_id: query_id.to_string(),
        hits: scored
            .into_iter()
            .map(|(s, id)| Hit {
                image_id: id.to_string(),
                score: s as f32,
                region_id: 0,
                bbox: BBox::new(0, 0, 0, 0),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryTruth {
    pub relevant: BTreeSet<String>,
    /// Instance boxes in relevant images, when annotated.
    pub boxes: Vec<(String, BBox)>,
}

/// Relevance judgments keyed by query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub queries: BTreeMap<String, QueryTruth>,
}

impl GroundTruth {
    /// Parses `query-id image-id [top left bottom right | top,left,bottom,right]`
    /// lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut gt = GroundTruth::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bbox = match toks.len() {
                2 => None,
                3 => Some(toks[2].parse::<BBox>()?),
                6 => Some(toks[2..].join(",").parse::<BBox>()?),
                _ => {
                    return Err(Error::Data(format!(
                        "ground truth line {}: expected `query image [box]`",
                        ln + 1
                    )))
                }
            };
            let q = gt.queries.entry(toks[0].to_string()).or_default();
            q.relevant.insert(toks[1].to_string());
            if let Some(b) = bbox {
                q.boxes.push((toks[1].to_string(), b));
            }
        }
        Ok(gt)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Checks every referenced image against an image roster.
    pub fn check_roster<'a>(&self, roster: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let roster: BTreeSet<&str> = roster.into_iter().collect();
        for (q, t) in &self.queries {
            if let Some(missing) = t.relevant.iter().find(|id| !roster.contains(id.as_str())) {
                return Err(Error::Data(format!("query `{q}` refers to unknown image `{missing}`")));
            }
        }
        Ok(())
    }
}

/// Average precision of a ranking truncated at `k` (`None` for the full list),
/// normalized by `min(k, #relevant)`.
pub fn average_precision<'a>(ranking: impl IntoIterator<Item = &'a str>, relevant: &BTreeSet<String>, k: Option<usize>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let limit = k.unwrap_or(usize::MAX);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranking.into_iter().take(limit).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / relevant.len().min(limit) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub per_query: Vec<(String, f64)>,
    /// Queries excluded for lacking relevant images or a ranked list.
    pub skipped: Vec<String>,
}

/// Mean AP over every ranked list whose query has at least one relevant image.
pub fn map_at_k(lists: &[RankedList], gt: &GroundTruth, k: Option<usize>) -> MapReport {
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for list in lists {
        match gt.queries.get(&list.query_id) {
            Some(t) if !t.relevant.is_empty() => {
                per_query.push((list.query_id.clone(), average_precision(list.image_ids(), &t.relevant, k)));
            }
            _ => {
                log::warn!("query `{}` has no relevant images, excluded", list.query_id);
                skipped.push(list.query_id.clone());
            }
        }
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64
    };
    MapReport { map, per_query, skipped }
}

pub fn default_iou_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// One ground-truth instance with the detections available for it.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationCase {
    pub truth: BBox,
    pub detections: Vec<BBox>,
}

/// Fraction of ground-truth instances matched by some detection with
/// IoU at least `t`, for each `t` in `thresholds`. Zero overlap never matches.
pub fn recall_iou_curve(cases: &[LocalizationCase], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let best: Vec<f64> = cases
        .iter()
        .map(|c| c.detections.iter().map(|d| iou(d, &c.truth)).fold(0.0, f64::max))
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let recall = if cases.is_empty() {
                0.0
            } else {
                best.iter().filter(|&&b| b > 0.0 && b >= t).count() as f64 / cases.len() as f64
            };
            (t, recall)
        })
        .collect()
}

/// Localization cases from a result file: for each annotated box of a query,
/// the best-region box of that image in the query's ranked list.
pub fn cases_from_results(lists: &[RankedList], gt: &GroundTruth) -> Vec<LocalizationCase> {
    let mut cases = Vec::new();
    for list in lists {
        let Some(t) = gt.queries.get(&list.query_id) else {
            continue;
        };
        let by_image: HashMap<&str, BBox> = list.hits.iter().map(|h| (h.image_id.as_str(), h.bbox)).collect();
        for (image, truth) in &t.boxes {
            cases.push(LocalizationCase {
                truth: *truth,
                detections: by_image.get(image.as_str()).copied().into_iter().collect(),
            });
        }
    }
    cases
}

/// Localization cases from raw detections: every annotated instance against
/// all regions detected in its image. Duplicate annotations count once.
pub fn cases_from_detections(records: &[Descriptor], gt: &GroundTruth) -> Vec<LocalizationCase> {
    let mut by_image: HashMap<&str, Vec<BBox>> = HashMap::new();
    for r in records {
        by_image.entry(&r.image_id).or_default().push(r.bbox);
    }
    let instances: BTreeSet<(String, (i32, i32, i32, i32))> = gt
        .queries
        .values()
        .flat_map(|t| t.boxes.iter())
        .map(|(img, b)| (img.clone(), (b.top, b.left, b.bottom, b.right)))
        .collect();
    instances
        .into_iter()
        .map(|(img, (t, l, b, r))| LocalizationCase {
            truth: BBox::new(t, l, b, r),
            detections: by_image.get(img.as_str()).cloned().unwrap_or_default(),
        })
        .collect()
}

/// Writes ranked lists as `# query <id>` blocks of
/// `rank image-id score top left bottom right` lines.
pub fn format_results(lists: &[RankedList], top: Option<usize>) -> String {
    let mut s = String::new();
    for list in lists {
        writeln!(s, "# query {}", list.query_id).unwrap();
        for (rank, h) in list.hits.iter().take(top.unwrap_or(usize::MAX)).enumerate() {
            writeln!(
                s,
                "{} {} {} {} {} {} {}",
                rank + 1,
                h.image_id,
                h.score,
                h.bbox.top,
                h.bbox.left,
                h.bbox.bottom,
                h.bbox.right
            )
            .unwrap();
        }
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<RankedList>> {
    let mut lists: Vec<RankedList> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(id) = rest.strip_prefix("query") {
                lists.push(RankedList {
                    query_id: id.trim().to_string(),
                    hits: Vec::new(),
                });
            }
            continue;
        }
        let err = || Error::Data(format!("results line {}: expected `rank image score top left bottom right`", ln + 1));
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(err());
        }
        let nums: Vec<i32> = toks[3..].iter().map(|t| t.parse().map_err(|_| err())).collect::<Result<_>>()?;
        let list = match lists.last_mut() {
            Some(l) => l,
            None => {
                lists.push(RankedList {
                    query_id: String::new(),
                    hits: Vec::new(),
                });
                lists.last_mut().unwrap()
            }
        };
        list.hits.push(Hit {
            image_id: toks[1].to_string(),
            score: toks[2].parse().map_err(|_| err())?,
            region_id: 0,
            bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
        });
    }
    Ok(lists)
}
