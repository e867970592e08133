//! End-to-end acceptance checks on synthetic cities with known ground truth.
//!
//! Runs as a plain binary (`harness = false`) and prints one PASS/FAIL line
//! per criterion; the process fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{Datelike, TimeZone, Timelike};
use citypulse_core::activity::ActivityType;
use citypulse_core::clusters::{
    build_features, compare_models, kmeans, label_cluster, ClusterLabel, ClusterModel, FeatureSet, FeatureVector,
    KMeansParams,
};
use citypulse_core::density::{ratio_map, Metric, Period};
use citypulse_core::events::{detect, DetectParams, EventReport};
use citypulse_core::metrics::{adjusted_rand_index, squared_euclidean};
use citypulse_core::profiles::{normalize, resample, residuals, typical_week, Resolution, WeeklyProfile};
use citypulse_core::spatial::{Aggregation, RegionSeries, CITY_REGION_ID};
use citypulse_core::store::{build_from, city_dir, BuildOptions, CityData, Layout};
use citypulse_core::synth::{builtin_templates, Archetype, ArchetypeMix, Scenario, ScenarioSpec};
use citypulse_core::time::{LocalCalendar, WeekId, BINS_PER_WEEK};
use http_body_util::BodyExt;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

const RUNTIME_TARGET: Duration = Duration::from_secs(60);

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// The default city, generated, aggregated and built into a store.
struct DefaultCity {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    scenario: Scenario,
    data: CityData,
    elapsed: Duration,
}

fn build_default() -> DefaultCity {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("store");
    let t0 = Instant::now();
    let scenario = Scenario::new(ScenarioSpec::default_city()).unwrap();
    let (table, agg) = scenario.aggregate().unwrap();
    let data = CityData::from_aggregation(scenario.spec.city.clone(), Vec::new(), table, agg).unwrap();
    build_from(&data, &root, &BuildOptions::default()).unwrap();
    let elapsed = t0.elapsed();
    DefaultCity {
        _tmp: tmp,
        root,
        scenario,
        data,
        elapsed,
    }
}

fn all_series(agg: &Aggregation) -> Vec<&RegionSeries> {
    agg.cells.values().chain(std::iter::once(&agg.city)).collect()
}

fn conservation(city: &DefaultCity) -> Check {
    let agg = &city.data.aggregation;
    let n = agg.city.len();
    let mut mismatched = 0usize;
    for t in ActivityType::ALL {
        let mut sum = vec![0u64; n];
        for s in agg.cells.values() {
            for (a, v) in sum.iter_mut().zip(s.values(t)) {
                *a += v;
            }
        }
        mismatched += sum.iter().zip(agg.city.values(t)).filter(|(a, b)| a != b).count();
    }

    let axis = city.scenario.calendar.axis;
    let mut worst_ratio = 0.0f64;
    let maps: Vec<_> = ActivityType::ALL
        .iter()
        .map(|&t| ratio_map(&agg.cells, &city.data.grid, &axis, t, Period::of_axis(&axis)).unwrap())
        .collect();
    let mut ratio_cells = 0;
    for i in 0..maps[0].values.len() {
        let parts: Vec<f64> = maps.iter().filter_map(|m| m.values[i]).collect();
        if parts.is_empty() {
            continue;
        }
        ratio_cells += 1;
        worst_ratio = worst_ratio.max((parts.iter().sum::<f64>() - 1.0).abs());
    }

    let calendar = &city.scenario.calendar;
    let mut bad_bins = 0usize;
    let mut full_bins = 0usize;
    for s in all_series(agg) {
        for t in ActivityType::ALL {
            let values = s.values(t);
            for res in Resolution::ALL {
                let mut offset = 0usize;
                for bin in resample(s, t, res, calendar) {
                    let w = bin.windows as usize;
                    if bin.present == bin.windows {
                        full_bins += 1;
                        if bin.value != Some(values[offset..offset + w].iter().sum()) {
                            bad_bins += 1;
                        }
                    }
                    offset += w;
                }
                if offset != n {
                    bad_bins += 1;
                }
            }
        }
    }

    let detail = format!(
        "{} cells x {} windows x 5 types, cell-sum mismatches {}; ratio closure max |sum-1| {:.2e} over {} cells; \
         resample mismatches {} of {} full bins; pipeline {:.1}s (target < {}s)",
        agg.cells.len(),
        n,
        mismatched,
        worst_ratio,
        ratio_cells,
        bad_bins,
        full_bins,
        city.elapsed.as_secs_f64(),
        RUNTIME_TARGET.as_secs()
    );
    ensure(
        mismatched == 0 && worst_ratio <= 1e-9 && bad_bins == 0 && city.elapsed < RUNTIME_TARGET,
        detail,
    )
}

/// Per-window local week bin and ISO week, worked out directly from the
/// time zone.
fn naive_bins(calendar: &LocalCalendar) -> Vec<(Option<usize>, WeekId)> {
    let tz = calendar.timezone;
    (0..calendar.len())
        .map(|i| {
            let local = calendar.axis.time_at(i).with_timezone(&tz).naive_local();
            let unique = tz.from_local_datetime(&local).single().is_some();
            let aligned = local.minute() % 15 == 0 && local.second() == 0;
            let bin = (unique && aligned).then(|| {
                local.weekday().num_days_from_monday() as usize * 96
                    + local.hour() as usize * 4
                    + local.minute() as usize / 15
            });
            let iso = local.date().iso_week();
            (bin, WeekId { year: iso.year(), week: iso.week() })
        })
        .collect()
}

fn brute_force_week(
    series: &RegionSeries,
    t: ActivityType,
    bins: &[(Option<usize>, WeekId)],
    exclude: &BTreeSet<WeekId>,
) -> (Vec<f64>, Vec<u32>) {
    let values = series.values(t);
    let mut means = vec![0.0; BINS_PER_WEEK];
    let mut counts = vec![0u32; BINS_PER_WEEK];
    for b in 0..BINS_PER_WEEK {
        let mut total = 0.0f64;
        let mut count = 0u32;
        for (i, (bin, week)) in bins.iter().enumerate() {
            if *bin == Some(b) && series.presence[i] && !exclude.contains(week) {
                total += values[i] as f64;
                count += 1;
            }
        }
        if count > 0 {
            means[b] = total / count as f64;
        }
        counts[b] = count;
    }
    (means, counts)
}

fn profile_oracle(city: &DefaultCity) -> Check {
    let calendar = &city.scenario.calendar;
    let bins = naive_bins(calendar);
    let series = all_series(&city.data.aggregation);
    let pairs: Vec<(&RegionSeries, ActivityType)> =
        series.iter().flat_map(|s| ActivityType::ALL.map(|t| (*s, t))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let holidays = city.scenario.truth.holiday_weeks();
    let mut worst = 0.0f64;
    let mut support_mismatch = 0;
    let picked = sample(&mut rng, pairs.len(), 100);
    for (j, idx) in picked.iter().enumerate() {
        let (s, t) = pairs[idx];
        let exclude = if j % 2 == 0 { BTreeSet::new() } else { holidays.clone() };
        let got = typical_week(s, t, calendar, &exclude);
        let (want, counts) = brute_force_week(s, t, &bins, &exclude);
        if got.support != counts {
            support_mismatch += 1;
        }
        for (g, w) in got.values.iter().zip(&want) {
            let err = if *w == 0.0 { g.abs() } else { (g - w).abs() / w.abs() };
            worst = worst.max(err);
        }
    }
    ensure(
        worst <= 1e-9 && support_mismatch == 0,
        format!("100 (region, type) pairs, max relative error {worst:.2e}, support mismatches {support_mismatch}"),
    )
}

fn cell_features(agg: &Aggregation, calendar: &LocalCalendar) -> FeatureSet {
    let mut profiles: BTreeMap<(String, ActivityType), WeeklyProfile> = BTreeMap::new();
    for s in agg.cells.values() {
        for t in ActivityType::ALL {
            let p = normalize(&typical_week(s, t, calendar, &BTreeSet::new()));
            profiles.insert((s.region_id.clone(), t), p);
        }
    }
    build_features(&profiles, &ActivityType::ALL).unwrap()
}

fn planted_label(a: Archetype) -> ClusterLabel {
    match a {
        Archetype::Business => ClusterLabel::Business,
        Archetype::Residential => ClusterLabel::Residential,
        Archetype::Leisure => ClusterLabel::Leisure,
        Archetype::Uniform => ClusterLabel::Other,
    }
}

fn three_archetype_spec(seed: u64, weeks: i64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::default_city();
    spec.seed = seed;
    spec.mix = ArchetypeMix {
        business: 1.0 / 3.0,
        residential: 1.0 / 3.0,
        leisure: 1.0 / 3.0,
        uniform: 0.0,
    };
    spec.city.period_end = spec.city.period_start + chrono::Duration::weeks(weeks);
    spec
}

/// Clusters a scenario's cells and returns the feature set, the model and the
/// planted archetype of each clustered cell.
fn cluster_scenario(spec: ScenarioSpec, k: usize) -> (FeatureSet, ClusterModel, Vec<Archetype>) {
    let scenario = Scenario::new(spec).unwrap();
    let (_, agg) = scenario.aggregate().unwrap();
    let features = cell_features(&agg, &scenario.calendar);
    let model = kmeans(&features, &KMeansParams::new(k, 0)).unwrap();
    let truth = features.vectors.iter().map(|v| scenario.truth.cells[&v.region_id]).collect();
    (features, model, truth)
}

struct Recovery {
    features: FeatureSet,
}

fn clustering_recovery(out: &mut Option<Recovery>) -> Check {
    let (features, model, truth) = cluster_scenario(three_archetype_spec(20130401, 12), 3);
    let predicted: Vec<usize> = features.vectors.iter().map(|v| model.assignment[&v.region_id]).collect();
    let truth_idx: Vec<usize> = truth.iter().map(|a| Archetype::ALL.iter().position(|b| b == a).unwrap()).collect();
    let ari = adjusted_rand_index(&predicted, &truth_idx);

    let mut label_errors = Vec::new();
    for c in 0..model.k {
        let mut votes: BTreeMap<Archetype, usize> = BTreeMap::new();
        for (p, a) in predicted.iter().zip(&truth) {
            if *p == c {
                *votes.entry(*a).or_default() += 1;
            }
        }
        let majority = votes.iter().max_by_key(|(_, n)| **n).map(|(a, _)| *a).unwrap();
        let label = label_cluster(&model.centroids[c], &model.types).unwrap();
        if label != planted_label(majority) || model.labels[c] != label {
            label_errors.push(format!("cluster {c}: {label:?} vs planted {majority:?}"));
        }
    }
    let detail = format!(
        "{} cells, k = 3, ARI {:.4} (need >= 0.95), labels {:?}{}",
        features.vectors.len(),
        ari,
        model.labels,
        if label_errors.is_empty() { String::new() } else { format!(", mismatched: {}", label_errors.join("; ")) }
    );
    *out = Some(Recovery { features });
    ensure(ari >= 0.95 && label_errors.is_empty(), detail)
}

/// Worst violation of the nearest-centroid and centroid-mean conditions.
fn fixed_point_gaps(set: &FeatureSet, model: &ClusterModel) -> (f64, f64) {
    let mut nearest_gap = 0.0f64;
    let mut sums = vec![vec![0.0; model.centroids[0].len()]; model.k];
    let mut sizes = vec![0usize; model.k];
    for v in &set.vectors {
        let c = model.assignment[&v.region_id];
        let own = squared_euclidean(&v.x, &model.centroids[c]);
        let best = model.centroids.iter().map(|m| squared_euclidean(&v.x, m)).fold(f64::INFINITY, f64::min);
        nearest_gap = nearest_gap.max(own - best);
        for (s, x) in sums[c].iter_mut().zip(&v.x) {
            *s += x;
        }
        sizes[c] += 1;
    }
    let mut mean_gap = 0.0f64;
    for c in 0..model.k {
        for (s, m) in sums[c].iter().zip(&model.centroids[c]) {
            mean_gap = mean_gap.max((s / sizes[c] as f64 - m).abs());
        }
    }
    (nearest_gap, mean_gap)
}

fn random_blobs(n: usize, dim: usize, seed: u64) -> FeatureSet {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..n)
        .map(|i| FeatureVector {
            region_id: format!("p{i:03}"),
            x: (0..dim).map(|d| (i % 4) as f64 * if d % 3 == 0 { 1.0 } else { 0.0 } + rng.random::<f64>()).collect(),
        })
        .collect();
    FeatureSet {
        types: vec![ActivityType::Calls],
        vectors,
        skipped: Vec::new(),
    }
}

fn toy_set() -> FeatureSet {
    let xs = [0.0, 0.1, 0.2, 10.0, 10.1];
    let vectors = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut v = vec![1.0 / BINS_PER_WEEK as f64; BINS_PER_WEEK];
            v[0] = x;
            FeatureVector {
                region_id: format!("t{i}"),
                x: v,
            }
        })
        .collect();
    FeatureSet {
        types: vec![ActivityType::Calls],
        vectors,
        skipped: Vec::new(),
    }
}

fn exhaustive_two_partition(set: &FeatureSet) -> (f64, u32) {
    let n = set.vectors.len();
    let sse = |members: &[&Vec<f64>]| {
        let dim = members[0].len();
        let mean: Vec<f64> =
            (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect();
        members.iter().map(|m| squared_euclidean(m, &mean)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0);
    for mask in 1..(1u32 << n) - 1 {
        let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|i| mask & (1 << i) != 0);
        let pa: Vec<&Vec<f64>> = a.iter().map(|&i| &set.vectors[i].x).collect();
        let pb: Vec<&Vec<f64>> = b.iter().map(|&i| &set.vectors[i].x).collect();
        let total = sse(&pa) + sse(&pb);
        if total < best.0 {
            best = (total, mask);
        }
    }
    best
}

fn kmeans_invariants(recovered: Option<&Recovery>) -> Check {
    let mut instances: Vec<(String, FeatureSet, usize)> = vec![("blobs".into(), random_blobs(200, 24, 3), 4)];
    if let Some(r) = recovered {
        instances.push(("cells k=3".into(), r.features.clone(), 3));
        instances.push(("cells k=6".into(), r.features.clone(), 6));
    }
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, set, k) in &instances {
        for seed in 0..3u64 {
            let params = KMeansParams::new(*k, seed);
            let a = kmeans(set, &params).unwrap();
            let b = kmeans(set, &params).unwrap();
            let monotone = a.sse_history.windows(2).all(|w| w[1] <= w[0]);
            let (near, mean) = fixed_point_gaps(set, &a);
            let identical = serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap()
                && a.sse_history.iter().map(|v| v.to_bits()).eq(b.sse_history.iter().map(|v| v.to_bits()));
            let pass = a.converged && monotone && near <= 1e-9 && mean <= 1e-9 && identical;
            ok &= pass;
            if seed == 0 || !pass {
                notes.push(format!(
                    "{name} seed {seed}: {} iters, converged {}, monotone {monotone}, nearest gap {near:.1e}, \
                     mean gap {mean:.1e}, deterministic {identical}",
                    a.iterations, a.converged
                ));
            }
        }
    }

    let toy = toy_set();
    let (best_sse, best_mask) = exhaustive_two_partition(&toy);
    let mut toy_ok = true;
    for seed in 0..10 {
        let m = kmeans(&toy, &KMeansParams::new(2, seed)).unwrap();
        let groups: Vec<usize> = (0..5).map(|i| m.assignment[&format!("t{i}")]).collect();
        let split = groups[0] == groups[1] && groups[1] == groups[2] && groups[3] == groups[4] && groups[0] != groups[3];
        toy_ok &= split && (m.sse - best_sse).abs() <= 1e-9;
    }
    let oracle_split = best_mask == 0b00111 || best_mask == 0b11000;
    notes.push(format!(
        "toy: exhaustive optimum SSE {best_sse:.6} splits first three | last two: {oracle_split}; k-means matches on 10 seeds: {toy_ok}"
    ));
    ensure(ok && toy_ok && oracle_split && recovered.is_some(), notes.join("; "))
}

fn read_events(layout: &Layout, region: &str, t: ActivityType) -> Vec<EventReport> {
    let text = std::fs::read_to_string(layout.events(region, t)).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn event_detection(city: &DefaultCity) -> Check {
    let layout = Layout::new(city_dir(&city.root, &city.scenario.spec.city.city_id));
    let truth = &city.scenario.truth.events[0];
    let (ts, te) = (truth.start_index, truth.end_index);
    let mut notes = Vec::new();
    let mut planted_ok = true;
    for t in ActivityType::ALL {
        let found = read_events(&layout, &truth.region_id, t);
        let best = found
            .iter()
            .map(|e| {
                let inter = (e.end_index.min(te) + 1).saturating_sub(e.start_index.max(ts));
                let union = e.end_index.max(te) + 1 - e.start_index.min(ts);
                (inter as f64 / union as f64, e)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((j, e)) => {
                let peak = city.scenario.calendar.axis.index_of(e.peak_window).unwrap();
                let inside = (ts..=te).contains(&peak);
                planted_ok &= j >= 0.8 && inside;
                notes.push(format!("{} Jaccard {j:.3} peak inside {inside}", t.as_str()));
            }
            None => {
                planted_ok = false;
                notes.push(format!("{} not detected", t.as_str()));
            }
        }
    }

    let mut spec = ScenarioSpec::default_city();
    spec.events.clear();
    spec.holidays.clear();
    let quiet = Scenario::new(spec).unwrap();
    let (_, agg) = quiet.aggregate().unwrap();
    let params = DetectParams::default();
    let series = all_series(&agg);
    let mut count = 0usize;
    for s in &series {
        for t in ActivityType::ALL {
            let profile = typical_week(s, t, &quiet.calendar, &BTreeSet::new());
            let res = residuals(s, t, &profile, &quiet.calendar);
            count += detect(&res, &quiet.calendar, &params).unwrap().len();
        }
    }
    let region_weeks = series.len() as f64 * quiet.calendar.len() as f64 / BINS_PER_WEEK as f64;
    let rate = 100.0 * count as f64 / region_weeks;
    notes.push(format!(
        "event-free scenario: {count} events (all types) over {region_weeks:.0} region-weeks = {rate:.3} per 100 (need <= 1)"
    ));
    ensure(planted_ok && rate <= 1.0, notes.join("; "))
}

fn trend_and_holiday(city: &DefaultCity) -> Check {
    let calendar = &city.scenario.calendar;
    let bins = resample(&city.data.aggregation.city, ActivityType::DataDown, Resolution::Week, calendar);
    let holidays = city.scenario.truth.holiday_weeks();
    let weeks: Vec<(usize, WeekId, f64)> = bins
        .iter()
        .enumerate()
        .skip(1)
        .take(bins.len().saturating_sub(2))
        .filter(|(_, b)| b.present == b.windows)
        .map(|(i, b)| {
            let local = b.start.with_timezone(&calendar.timezone).date_naive();
            let per_week = b.value.unwrap() as f64 * BINS_PER_WEEK as f64 / b.windows as f64;
            (i, WeekId::of(local), per_week)
        })
        .collect();
    let fit: Vec<(f64, f64)> =
        weeks.iter().filter(|w| !holidays.contains(&w.1)).map(|w| (w.0 as f64, w.2.ln())).collect();
    let n = fit.len() as f64;
    let mx = fit.iter().map(|p| p.0).sum::<f64>() / n;
    let my = fit.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / fit.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let rate = slope.exp() - 1.0;
    let rate_ok = (rate - 0.01).abs() <= 0.003;

    let mut notes = vec![format!("{} full weeks, fitted growth {:.5}/week (need 0.01 +- 0.003)", fit.len(), rate)];
    let mut holiday_ok = !holidays.is_empty();
    for h in &holidays {
        let Some(pos) = weeks.iter().position(|w| w.1 == *h) else {
            holiday_ok = false;
            notes.push(format!("holiday week {h:?} not in the data"));
            continue;
        };
        let (idx, _, total) = weeks[pos];
        let around: Vec<&(usize, WeekId, f64)> =
            weeks.iter().filter(|w| w.0.abs_diff(idx) <= 5 && w.0 != idx).collect();
        let lowest_other = around.iter().map(|w| w.2).fold(f64::INFINITY, f64::min);
        let is_min = total < lowest_other;
        holiday_ok &= is_min;
        notes.push(format!(
            "holiday {}-W{:02} total {:.4e} vs lowest of {} neighbouring weeks {:.4e}: minimum {}",
            h.year,
            h.week,
            total,
            around.len(),
            lowest_other,
            is_min
        ));
    }
    ensure(rate_ok && holiday_ok, notes.join("; "))
}

fn shifted(shape: &[f64], bins: isize) -> Vec<f64> {
    let mut v = shape.to_vec();
    if bins >= 0 {
        v.rotate_right(bins as usize);
    } else {
        v.rotate_left(bins.unsigned_abs());
    }
    v
}

fn cross_city() -> Check {
    let base = builtin_templates();
    let residential = &base[1][0];
    let mut models = Vec::new();
    for (seed, shift) in [(101u64, -4isize), (202, 4)] {
        let mut spec = three_archetype_spec(seed, 8);
        spec.city.city_id = format!("city{seed}");
        spec.events.clear();
        spec.set_template(Archetype::Residential, shifted(residential, shift));
        let (_, model, _) = cluster_scenario(spec, 3);
        models.push(model);
    }
    let (a, b) = (&models[0], &models[1]);
    let cmp = compare_models(a, b).unwrap();
    let matched = |label: ClusterLabel| {
        cmp.matches
            .iter()
            .find(|m| a.labels[m.a] == label && b.labels[m.b] == label)
            .map(|m| m.distance)
    };
    let (business, residential) = (matched(ClusterLabel::Business), matched(ClusterLabel::Residential));
    let detail = format!(
        "labels {:?} / {:?}; matched business distance {:?}, matched residential distance {:?}",
        a.labels, b.labels, business, residential
    );
    match (business, residential) {
        (Some(db), Some(dr)) => ensure(db < dr, detail),
        _ => Err(detail),
    }
}

async fn fetch(app: &axum::Router, uri: &str) -> (StatusCode, String, Vec<u8>) {
    let res = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = res.status();
    let ctype = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    (status, ctype, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn api_equivalence(city: &DefaultCity) -> Check {
    let store = Arc::new(citypulse_server::Store::open(&city.root).map_err(|e| e.to_string())?);
    let app = citypulse_server::router(store.clone(), None);
    let id = city.scenario.spec.city.city_id.clone();
    let c = &store.cities[&id];
    let layout = &c.layout;
    let api = format!("/api/cities/{id}");

    let mut cases: Vec<(String, &str, PathBuf)> = vec![
        (format!("{api}/meta"), "meta", layout.meta()),
        (format!("{api}/manifest"), "manifest", layout.manifest()),
        (format!("{api}/regions"), "regions", layout.regions()),
        (format!("{api}/clusters/select_k"), "select_k", layout.select_k()),
    ];
    for k in &c.meta.cluster_ks {
        cases.push((format!("{api}/clusters?k={k}"), "clusters", layout.cluster_model(*k)));
    }
    let first_cell = c.regions[0].region_id.clone();
    for region in [CITY_REGION_ID.to_string(), "5:5".to_string(), first_cell] {
        for t in ActivityType::ALL {
            let q = format!("{api}/regions/{region}");
            let ts = t.as_str();
            for res in Resolution::ALL {
                cases.push((
                    format!("{q}/series?type={ts}&res={}", res.as_str()),
                    "series",
                    layout.series(&region, t, res),
                ));
            }
            for norm in [true, false] {
                cases.push((
                    format!("{q}/typicalweek?type={ts}&normalized={norm}"),
                    "typicalweek",
                    layout.profile(&region, t, norm),
                ));
            }
            cases.push((format!("{q}/residuals?type={ts}"), "residuals", layout.residuals(&region, t)));
            cases.push((format!("{q}/events?type={ts}"), "events", layout.events(&region, t)));
        }
    }
    for p in [&c.meta.density_periods[0], &c.meta.density_periods[1]] {
        let range = format!(
            "from={}&to={}",
            citypulse_core::time::format_utc(p.start),
            citypulse_core::time::format_utc(p.end)
        );
        for t in ActivityType::ALL {
            let ts = t.as_str();
            cases.push((
                format!("{api}/density?metric=volume&type={ts}&{range}"),
                "density",
                layout.density(Metric::Volume, t, None, &p.key),
            ));
            cases.push((
                format!("{api}/density?metric=ratio&type={ts}&{range}"),
                "density",
                layout.density(Metric::Ratio, t, None, &p.key),
            ));
            for o in ActivityType::ALL.into_iter().filter(|o| *o != t) {
                cases.push((
                    format!("{api}/density?metric=pair_ratio&type={ts}&other={}&{range}", o.as_str()),
                    "density",
                    layout.density(Metric::PairRatio, t, Some(o), &p.key),
                ));
            }
        }
    }

    let errors = [
        ("/api/cities/atlantis/meta".to_string(), StatusCode::NOT_FOUND, "city_not_found"),
        (format!("{api}/regions/99:99/series"), StatusCode::NOT_FOUND, "region_not_found"),
        (format!("{api}/clusters?k=42"), StatusCode::NOT_FOUND, "k_not_found"),
        (format!("{api}/density?from=2013-04-02T00:00:00Z"), StatusCode::NOT_FOUND, "period_not_found"),
        (format!("{api}/regions/city/series?type=MMS"), StatusCode::BAD_REQUEST, "invalid_parameter"),
        (format!("{api}/widgets"), StatusCode::NOT_FOUND, "not_found"),
        ("/".to_string(), StatusCode::NOT_FOUND, "not_found"),
    ];

    let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
    let (mut kinds, mut mismatched, mut bad_errors) = (BTreeSet::new(), Vec::new(), Vec::new());
    rt.block_on(async {
        for (uri, kind, path) in &cases {
            let (status, _, body) = fetch(&app, uri).await;
            kinds.insert(*kind);
            if status != StatusCode::OK || body != std::fs::read(path).unwrap() {
                mismatched.push(uri.clone());
            }
        }
        for (uri, status, code) in &errors {
            let (s, ctype, body) = fetch(&app, uri).await;
            let got: Option<String> = serde_json::from_slice::<serde_json::Value>(&body)
                .ok()
                .and_then(|v| v["error"]["code"].as_str().map(str::to_string));
            if s != *status || ctype != "application/json" || got.as_deref() != Some(*code) {
                bad_errors.push(format!("{uri} -> {s} {got:?}"));
            }
        }
    });
    let detail = format!(
        "{} requests over {} object types ({}), byte mismatches {:?}; {} error cases, wrong {:?}; no UI directory",
        cases.len(),
        kinds.len(),
        kinds.iter().copied().collect::<Vec<_>>().join(", "),
        mismatched,
        errors.len(),
        bad_errors
    );
    ensure(mismatched.is_empty() && bad_errors.is_empty(), detail)
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
        Err(d) => println!("FAIL {name} ({secs:.1}s): {d}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut passed = Vec::new();
    let city = catch_unwind(build_default);
    let city = city.as_ref().ok();
    let missing = || Err("default city could not be built".to_string());

    passed.push(run("conservation", || city.map_or_else(missing, conservation)));
    passed.push(run("profile-oracle", || city.map_or_else(missing, profile_oracle)));
    let mut recovery = None;
    passed.push(run("clustering-recovery", || clustering_recovery(&mut recovery)));
    passed.push(run("kmeans-invariants", || kmeans_invariants(recovery.as_ref())));
    passed.push(run("event-detection", || city.map_or_else(missing, event_detection)));
    passed.push(run("trend-and-holiday", || city.map_or_else(missing, trend_and_holiday)));
    passed.push(run("cross-city", cross_city));
    passed.push(run("api-equivalence", || city.map_or_else(missing, api_equivalence)));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {} failed", passed.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
