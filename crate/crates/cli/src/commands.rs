use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use traceng::baselines::{self, DampedHessian, RepresenterSettings, SketchSettings};
use traceng::eval::{self, FixOutcome, RecoveryCurve, SelfScoring};
use traceng::influence::{self, InfluenceRecord, Method, TracInCp};
use traceng::model::{self, Example, ExampleId, ModelState};
use traceng::retrieval::{self, InfluenceIndex};
use traceng::training::{self, TrainOutcome};

use crate::config::ExperimentConfig;
use crate::run::{self, Datasets, DEFAULT_SKETCH_D};
use crate::CliError;

const INDEX_FILE: &str = "index.tidx";

struct Prepared {
    data: Datasets,
    outcome: TrainOutcome,
}

fn prepare(c: &ExperimentConfig) -> Result<Prepared, CliError> {
    let data = run::load_datasets(c)?;
    let spec = run::model_spec(c, &data)?;
    let config = run::train_config(c)?;
    let outcome = run::train_or_load(&c.paths.out, &spec, &config, &data)?;
    Ok(Prepared { data, outcome })
}

fn sketch_settings(c: &ExperimentConfig) -> SketchSettings {
    SketchSettings {
        scope: c.influence.hessian_scope,
        damping: c.influence.damping,
        seed: c.seeds.sketch,
        ..SketchSettings::default()
    }
}

fn representer_settings(c: &ExperimentConfig) -> RepresenterSettings {
    RepresenterSettings {
        lambda: c.influence.representer_lambda,
        ..RepresenterSettings::default()
    }
}

fn exclusion<'a>(c: &ExperimentConfig, p: &'a Prepared) -> Option<(&'a ModelState, &'a [Example])> {
    c.influence
        .filter_misclassified
        .then_some((&p.outcome.final_state, p.data.train.as_slice()))
}

fn record(method: Method, train_id: ExampleId, test_id: ExampleId, score: f64) -> InfluenceRecord {
    InfluenceRecord {
        train_id,
        test_id,
        method,
        score,
        per_checkpoint: None,
    }
}

/// Influence of every training example on each probe, one row per pair.
fn pair_scores(
    c: &ExperimentConfig,
    p: &Prepared,
    probes: &[&Example],
) -> Result<Vec<Vec<InfluenceRecord>>, CliError> {
    let method = c.influence.method;
    let train = &p.data.train;
    let state = &p.outcome.final_state;
    let trace = &p.outcome.trace;
    let rows = match method {
        Method::TracinCp | Method::TracinCpEqual => {
            let mut sel = run::selection(c, &p.outcome)?;
            if method == Method::TracinCpEqual {
                sel = sel.with_equal_weights();
            }
            let scorer = TracInCp::new(&sel, &p.outcome.checkpoints, run::gradient_view(c))?;
            probes
                .iter()
                .map(|z| scorer.score_all(train, z))
                .collect::<traceng::Result<_>>()?
        }
        Method::FirstOrder => {
            let owned: Vec<Example> = probes.iter().map(|&z| z.clone()).collect();
            influence::tracin_first_order_all(trace, train, &owned)?
                .into_iter()
                .zip(probes)
                .map(|(row, z)| {
                    train
                        .iter()
                        .zip(row)
                        .map(|(t, s)| record(method, t.id, z.id, s))
                        .collect()
                })
                .collect()
        }
        Method::Idealized => probes
            .iter()
            .map(|z| {
                let scores = influence::idealized_influence_all(trace, train, z)?;
                Ok(train
                    .iter()
                    .map(|t| record(method, t.id, z.id, scores[&t.id]))
                    .collect())
            })
            .collect::<traceng::Result<_>>()?,
        Method::InfluenceFunction => {
            let direct =
                DampedHessian::build(state, train, c.influence.hessian_scope, c.influence.damping)?
                    .factor()?;
            probes
                .iter()
                .map(|z| {
                    let v = direct.test_vector(state, z)?;
                    train
                        .iter()
                        .map(|t| Ok(record(method, t.id, z.id, direct.score_with(state, t, &v)?)))
                        .collect()
                })
                .collect::<traceng::Result<_>>()?
        }
        Method::InfluenceFunctionSketched => {
            let d = c.influence.sketch_d.unwrap_or(DEFAULT_SKETCH_D);
            let sk = baselines::inverse_hessian_sketch(
                state,
                train,
                run::sketch_spec(c, d),
                sketch_settings(c),
            )?;
            probes
                .iter()
                .map(|z| {
                    let test = sk.test_side(state, z)?;
                    train
                        .iter()
                        .map(|t| Ok(record(method, t.id, z.id, sk.score_with(state, t, &test)?)))
                        .collect()
                })
                .collect::<traceng::Result<_>>()?
        }
        Method::Representer => {
            let rep = baselines::representer_finetune(state, train, representer_settings(c))?;
            probes
                .iter()
                .map(|z| {
                    train
                        .iter()
                        .map(|t| Ok(record(method, t.id, z.id, rep.influence_score(t, z)?)))
                        .collect()
                })
                .collect::<traceng::Result<_>>()?
        }
    };
    Ok(rows)
}

/// `test_id,direction,rank,id,score` rows for the top `k` in each direction.
fn ranked_rows(
    test_id: ExampleId,
    scores: &[(ExampleId, f64)],
    k: usize,
    exclude: Option<(&ModelState, &[Example])>,
) -> Result<Vec<[String; 5]>, CliError> {
    let lookup: HashMap<ExampleId, f64> = scores.iter().copied().collect();
    let mut rows = Vec::new();
    for (name, descending) in [("proponent", true), ("opponent", false)] {
        let order = influence::rank_examples(scores, descending, exclude)?;
        for (rank, id) in order.into_iter().take(k).enumerate() {
            rows.push([
                test_id.to_string(),
                name.to_string(),
                (rank + 1).to_string(),
                id.to_string(),
                lookup[&id].to_string(),
            ]);
        }
    }
    Ok(rows)
}

fn write_ranked(path: &PathBuf, rows: &[[String; 5]], echo: bool) -> Result<(), CliError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["test_id", "direction", "rank", "id", "score"])?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(path, &buf)?;
    if echo {
        io::stdout().write_all(&buf)?;
    }
    Ok(())
}

pub fn train(c: &ExperimentConfig) -> Result<(), CliError> {
    let data = run::load_datasets(c)?;
    let spec = run::model_spec(c, &data)?;
    let config = run::train_config(c)?;
    let outcome = training::train(&config, &data.train, &spec)?;
    let out = &c.paths.out;
    fs::create_dir_all(out)?;
    let written = run::save_training(out, &spec, &config, &data, &outcome)?;
    run::write_provenance(c, "train", &data, &written)?;
    let acc = if data.test.is_empty() || spec.loss_kind != model::LossKind::SoftmaxCrossEntropy {
        String::from("n/a")
    } else {
        format!("{:.4}", model::accuracy(&outcome.final_state, &data.test)?)
    };
    println!(
        "trained {} steps, {} checkpoints, final train loss {:.6}, test accuracy {acc}",
        outcome.trace.num_steps(),
        outcome.checkpoints.len(),
        outcome
            .trace
            .epoch_losses
            .last()
            .copied()
            .unwrap_or(outcome.trace.initial_loss),
    );
    Ok(())
}

pub fn influence(c: &ExperimentConfig) -> Result<(), CliError> {
    let p = prepare(c)?;
    let probes = run::find_examples(&p.data.test, &c.influence.test_ids, "test")?;
    let per_probe = pair_scores(c, &p, &probes)?;
    let out = &c.paths.out;
    let records: Vec<InfluenceRecord> = per_probe.iter().flatten().cloned().collect();
    let csv_path = out.join("influence.csv");
    influence::write_influence_csv(BufWriter::new(File::create(&csv_path)?), &records)?;
    let json_path = out.join("influence.json");
    serde_json::to_writer(BufWriter::new(File::create(&json_path)?), &records)?;
    let mut outputs = vec![csv_path, json_path];
    if c.influence.top_k > 0 {
        let mut rows = Vec::new();
        for (z, recs) in probes.iter().zip(&per_probe) {
            let scores: Vec<(ExampleId, f64)> =
                recs.iter().map(|r| (r.train_id, r.score)).collect();
            rows.extend(ranked_rows(
                z.id,
                &scores,
                c.influence.top_k,
                exclusion(c, &p),
            )?);
        }
        let path = out.join("proponents.csv");
        write_ranked(&path, &rows, true)?;
        outputs.push(path);
    }
    run::write_provenance(c, "influence", &p.data, &outputs)
}

fn self_scoring<'a>(
    c: &ExperimentConfig,
    p: &'a Prepared,
    sel: &'a influence::CheckpointSelection,
    dataset: &'a [Example],
) -> SelfScoring<'a> {
    let mut s = SelfScoring::new(&p.outcome.final_state, &p.outcome.checkpoints, sel, dataset);
    s.view = run::gradient_view(c);
    s.trace = Some(&p.outcome.trace);
    s.if_damping = c.influence.damping;
    let d = c.influence.sketch_d.unwrap_or(DEFAULT_SKETCH_D);
    s.sketch = Some((run::sketch_spec(c, d), sketch_settings(c)));
    s.representer = representer_settings(c);
    s
}

pub fn self_scan(c: &ExperimentConfig) -> Result<(), CliError> {
    let p = prepare(c)?;
    let sel = run::selection(c, &p.outcome)?;
    let scores = self_scoring(c, &p, &sel, &p.data.train).scores(c.influence.method)?;
    let order = influence::rank_examples(&scores, true, exclusion(c, &p))?;
    let lookup: HashMap<ExampleId, f64> = scores.iter().copied().collect();
    let examples: HashMap<ExampleId, &Example> = p.data.train.iter().map(|z| (z.id, z)).collect();
    let path = c.paths.out.join("self_influence.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["rank", "id", "score", "label", "true_label"])?;
    for (rank, id) in order.iter().enumerate() {
        let z = examples[id];
        let label = match z.label {
            model::Target::Class(k) => k.to_string(),
            model::Target::Value(v) => v.to_string(),
        };
        w.write_record([
            (rank + 1).to_string(),
            id.to_string(),
            lookup[id].to_string(),
            label,
            z.true_label.map_or(String::new(), |t| t.to_string()),
        ])?;
    }
    w.flush()?;
    if let Some(top) = order.first() {
        println!(
            "ranked {} examples by {}; top id {top} score {}",
            order.len(),
            c.influence.method,
            lookup[top]
        );
    }
    run::write_provenance(c, "self-scan", &p.data, &[path])
}

fn subsample(curve: &RecoveryCurve, grid: usize) -> RecoveryCurve {
    let stride = (curve.points.len() - 1) / (grid - 1);
    RecoveryCurve {
        points: curve.points.iter().step_by(stride).copied().collect(),
        auc: curve.auc,
    }
}

pub fn mislabel_eval(c: &ExperimentConfig) -> Result<(), CliError> {
    let clean = prepare(c)?;
    let spec = run::model_spec(c, &clean.data)?;
    let config = run::train_config(c)?;
    let dirty = eval::inject_mislabels(
        &clean.data.train,
        c.eval.mislabel_fraction,
        &clean.outcome.final_state,
        c.seeds.inject,
    )?;
    log::info!(
        "training on {} examples with injected mislabels",
        dirty.len()
    );
    let outcome = training::train(&config, &dirty, &spec)?;
    let p = Prepared {
        data: Datasets {
            train: dirty,
            test: clean.data.test,
            manifests: clean.data.manifests,
        },
        outcome,
    };
    let sel = run::selection(c, &p.outcome)?;
    let scoring = self_scoring(c, &p, &sel, &p.data.train);

    let mut ranked: Vec<(String, Vec<(ExampleId, f64)>)> = Vec::new();
    for &method in &c.eval.methods {
        log::info!("scoring with {method}");
        ranked.push((method.to_string(), scoring.scores(method)?));
    }
    ranked.push((
        "random".into(),
        eval::random_scores(&p.data.train, c.seeds.inject),
    ));

    let mut curves = Vec::new();
    for (name, scores) in &ranked {
        curves.push((name.clone(), eval::recovery_curve(scores, &p.data.train)?));
    }
    let mut fixes: Vec<(String, FixOutcome)> = Vec::new();
    for (name, scores) in &ranked {
        for &f in &c.eval.fix_fractions {
            let outcome =
                eval::fix_and_retrain(&p.data.train, scores, f, &config, &spec, &p.data.test)?;
            fixes.push((name.clone(), outcome));
        }
    }

    let out = &c.paths.out;
    let curves_path = out.join("recovery_curves.csv");
    let written: Vec<(String, RecoveryCurve)> = curves
        .iter()
        .map(|(n, cv)| (n.clone(), subsample(cv, c.eval.curve_grid)))
        .collect();
    eval::write_curves_csv(BufWriter::new(File::create(&curves_path)?), &written)?;
    let auc_path = out.join("auc.csv");
    let mut w = csv::Writer::from_path(&auc_path)?;
    w.write_record([
        "method",
        "auc",
        "recovered_at_0.1",
        "recovered_at_0.2",
        "recovered_at_0.3",
    ])?;
    for (name, cv) in &curves {
        w.write_record([
            name.clone(),
            cv.auc.to_string(),
            cv.at(0.1).to_string(),
            cv.at(0.2).to_string(),
            cv.at(0.3).to_string(),
        ])?;
    }
    w.flush()?;
    let fix_path = out.join("fix_and_retrain.csv");
    eval::write_fix_csv(BufWriter::new(File::create(&fix_path)?), &fixes)?;
    let dirty_path = out.join("mislabelled_train.csv");
    traceng::data::save_csv(&p.data.train, &dirty_path)?;

    println!(
        "{:<28} {:>7} {:>7} {:>7} {:>7}",
        "method", "auc", "r@0.1", "r@0.2", "r@0.3"
    );
    for (name, cv) in &curves {
        println!(
            "{name:<28} {:>7.4} {:>7.3} {:>7.3} {:>7.3}",
            cv.auc,
            cv.at(0.1),
            cv.at(0.2),
            cv.at(0.3)
        );
    }
    run::write_provenance(
        c,
        "mislabel-eval",
        &p.data,
        &[curves_path, auc_path, fix_path, dirty_path],
    )
}

pub fn index_build(c: &ExperimentConfig) -> Result<(), CliError> {
    let p = prepare(c)?;
    let sel = run::selection(c, &p.outcome)?;
    let d = c.influence.sketch_d.unwrap_or(DEFAULT_SKETCH_D);
    let index = retrieval::build_index(
        &p.data.train,
        &p.outcome.checkpoints,
        &sel,
        run::sketch_spec(c, d),
        run::layer(c),
    )?;
    let path = c.paths.out.join(INDEX_FILE);
    index.save(&path)?;
    println!(
        "indexed {} examples: {} checkpoints x d={} -> {} floats each",
        index.len(),
        sel.len(),
        d,
        index.width()
    );
    run::write_provenance(c, "index-build", &p.data, &[path])
}

pub fn index_query(c: &ExperimentConfig) -> Result<(), CliError> {
    let path = c.paths.out.join(INDEX_FILE);
    let index = InfluenceIndex::load(&path)?;
    if let Some(d) = c.influence.sketch_d {
        let wanted = run::sketch_spec(c, d);
        if wanted != index.provenance.spec {
            return Err(traceng::Error::SketchMismatch(format!(
                "query asks for {wanted:?} but {} was built with {:?}",
                path.display(),
                index.provenance.spec
            ))
            .into());
        }
    }
    let p = prepare(c)?;
    let probes = run::find_examples(&p.data.test, &c.influence.test_ids, "test")?;
    let mut rows = Vec::new();
    for z in probes {
        let q = index.query_vector(&p.outcome.checkpoints, z)?;
        let scores = index.scores(&q)?;
        rows.extend(ranked_rows(
            z.id,
            &scores,
            c.influence.top_k,
            exclusion(c, &p),
        )?);
    }
    let out = c.paths.out.join("query.csv");
    write_ranked(&out, &rows, true)?;
    run::write_provenance(c, "index-query", &p.data, &[out])
}
