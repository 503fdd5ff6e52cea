use memelab::data::{extract_confounders, generate, pick_missing, split_dataset, GenConfig};
use memelab::effects::{miate, midas, Analysis, BootstrapConfig, ScoreVariant};
use memelab::model::{Model, ModelConfig};
use memelab::train::{accuracy, train, BiasMode, TrainConfig};
use std::time::Instant;

fn main() {
    let gen_cfg = GenConfig { seed: 11, ..GenConfig::default() };
    let data = generate(&gen_cfg).unwrap();
    let (train_set, eval_set) = split_dataset(&data, 0.25, 1);

    let model = Model::new(ModelConfig { seed: 5, ..ModelConfig::default() }).unwrap();
    let cfg = TrainConfig { epochs: 40, seed: 3, ..TrainConfig::default() };
    let out = train(&model, &train_set, &cfg).unwrap();
    println!("eval acc {:.3}", accuracy(&out.model, &eval_set).unwrap());
    // confusion by signal cell
    let mut cells: std::collections::BTreeMap<(bool,bool),(usize,usize)> = Default::default();
    for s in &eval_set {
        let theta = out.model.predict_prob(s).unwrap();
        let e = cells.entry((s.t_signal, s.i_signal)).or_default();
        e.1 += 1;
        if (theta > 0.5) == s.is_hateful() { e.0 += 1; }
    }
    for (cell, (ok, n)) in &cells {
        println!("cell {:?}: {}/{}", cell, ok, n);
    }

    let pairs = extract_confounders(&data);
    let pool: Vec<_> = data.iter().filter(|s| s.group_id.is_none()).cloned().collect();
    let triples = pick_missing(&pairs, &pool, 3, 7).unwrap();
    let bs = BootstrapConfig { resamples: 200, seed: 1 };

    for (name, m) in [("balanced", &out.model)] {
        for analysis in [Analysis::Image, Analysis::Text] {
            let mi = miate(m, &triples, analysis, &bs).unwrap();
            println!("{name} miate {analysis:?}: mean {:.4} ci [{:.4},{:.4}]", mi.mean, mi.ci_lower, mi.ci_upper);
        }
    }
    let t0 = Instant::now();
    for variant in [ScoreVariant::Attattr, ScoreVariant::AttentionOnly, ScoreVariant::GradientOnly] {
        let md = midas(&out.model, &triples, Analysis::Text, variant, 20, &bs).unwrap();
        println!("balanced midas text {variant:?}: wt {:+.3e} wi {:+.3e} cm {:+.3e} all {:+.3e}",
            md.within_text.mean, md.within_image.mean, md.cross_modal.mean, md.all.mean);
    }
    println!("midas x3 time {:.1?}", t0.elapsed());

    let cfg_t = TrainConfig { epochs: 40, seed: 3, bias_mode: BiasMode::TextOnly, ..TrainConfig::default() };
    let out_txt = train(&model, &train_set, &cfg_t).unwrap();
    let md_txt = midas(&out_txt.model, &triples, Analysis::Text, ScoreVariant::Attattr, 20, &bs).unwrap();
    println!("text_only midas text Attattr: wt {:+.3e} wi {:+.3e} cm {:+.3e}",
        md_txt.within_text.mean, md_txt.within_image.mean, md_txt.cross_modal.mean);
    let md_img = midas(&out_txt.model, &triples, Analysis::Image, ScoreVariant::Attattr, 20, &bs).unwrap();
    println!("text_only midas image Attattr: wt {:+.3e} wi {:+.3e} cm {:+.3e}",
        md_img.within_text.mean, md_img.within_image.mean, md_img.cross_modal.mean);
}
