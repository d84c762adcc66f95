use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scsd_core::autodiff::{check::probe_gradients, Tensor};
use scsd_core::config::RunConfig;
use scsd_core::pipeline::dataset::{generate_dataset, CLASS_NAMES};
use scsd_core::pipeline::losses::{layer_losses, matching_costs, segmentation_losses, targets_from_label_map};
use scsd_core::pipeline::hungarian::match_queries;
use scsd_core::pipeline::train::downsample_labels;
use scsd_core::pipeline::{ForwardMode, SegModel};
use scsd_core::sso::{style_aggregation_loss, style_contrastive_loss, SynergyState};
use ndarray::Ix2;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cfg = RunConfig::default();
    cfg.model.num_queries = 5;
    cfg.model.d_q = 16;
    cfg.model.d_emb = 8;
    cfg.model.d_style = 8;
    cfg.model.heads = 2;
    cfg.model.backbone_channels = [4, 6, 8, 12];
    let model = SegModel::new(&cfg).unwrap();
    let domains = cfg.ordered_domains();
    let sample = generate_dataset(&domains[..1], 1, 3, 64).unwrap().remove(0);
    let labels16 = downsample_labels(&sample.labels, 16, 16);
    let (targets, valid) = targets_from_label_map(&labels16, CLASS_NAMES.len());
    let mut syn = SynergyState::new(cfg.sso.clone());
    syn.ref_sc = Some(0.6);
    syn.ref_sa = Some(1.1);

    // Fixed assignments computed at the base point.
    let base_out = model.forward(&sample, ForwardMode::Train { condition_index: 2 }).unwrap();
    let fixed: Vec<Vec<(usize, usize)>> = base_out.predictions.layers.iter().map(|l| {
        let c = l.class_logits.to_array().into_dimensionality::<Ix2>().unwrap();
        let m = l.mask_logits.to_array().into_dimensionality::<Ix2>().unwrap();
        match_queries(&matching_costs(&c, &m, &targets, &valid).unwrap()).unwrap()
    }).collect();

    let all_params = model.params();
    let picks: Vec<Tensor> = ["queries", "tdst.adapter3.weight", "sso.bank", "mask_decoder.layer0.cross.wq.weight", "sqb.booster.attn_s.wo.weight"]
        .iter()
        .map(|name| all_params.iter().find(|(n, _)| n == name).unwrap().1.clone())
        .collect();

    // (a) full loss with internal (re-computed) matching
    let loss_dyn = || {
        let out = model.forward(&sample, ForwardMode::Train { condition_index: 2 }).unwrap();
        let (l_cls, l_seg) = segmentation_losses(&out.predictions, &targets, &valid).unwrap();
        l_cls.add(&l_seg)
    };
    let e = probe_gradients(&picks, loss_dyn, 8, 1e-5, &mut rng);
    println!("seg loss, dynamic matching: {e:.3e}");

    // (b) fixed matching
    let loss_fixed = || {
        let out = model.forward(&sample, ForwardMode::Train { condition_index: 2 }).unwrap();
        let mut acc: Option<Tensor> = None;
        for (layer, pairs) in out.predictions.layers.iter().zip(&fixed) {
            let (c, s) = layer_losses(layer, &targets, &valid, pairs).unwrap();
            let l = c.add(&s);
            acc = Some(match acc { Some(a) => a.add(&l), None => l });
        }
        acc.unwrap()
    };
    let e = probe_gradients(&picks, loss_fixed, 8, 1e-5, &mut rng);
    println!("seg loss, fixed matching:   {e:.3e}");

    // (c) style losses only
    let loss_style = || {
        let out = model.forward(&sample, ForwardMode::Train { condition_index: 2 }).unwrap();
        let rows = model.style_rows(&sample.labels, 2).unwrap();
        let l_sc = style_contrastive_loss(&out.styled, &model.sso.bank, &model.sso.projector, 2, cfg.sso.tau).unwrap();
        let spec = model.sso.project_specific_rows(&rows.spec).unwrap();
        let l_sa = style_aggregation_loss(&out.styled, &spec, &cfg.sa_layer_weights).unwrap();
        let (l_s, _) = syn.clone().total_style_loss(&l_sc, &l_sa);
        l_s
    };
    let e = probe_gradients(&picks, loss_style, 8, 1e-5, &mut rng);
    println!("style losses only:          {e:.3e}");

    // (d) style losses with the synergy weights frozen at the base point
    // (matching the stop-gradient semantics of the analytic graph).
    let (w_sc0, w_sa0) = {
        let out = model.forward(&sample, ForwardMode::Train { condition_index: 2 }).unwrap();
        let l_sc = style_contrastive_loss(&out.styled, &model.sso.bank, &model.sso.projector, 2, cfg.sso.tau).unwrap();
        let rows = model.style_rows(&sample.labels, 2).unwrap();
        let spec = model.sso.project_specific_rows(&rows.spec).unwrap();
        let l_sa = style_aggregation_loss(&out.styled, &spec, &cfg.sa_layer_weights).unwrap();
        let (_, w) = syn.clone().total_style_loss(&l_sc, &l_sa);
        w
    };
    let loss_frozen = || {
        let out = model.forward(&sample, ForwardMode::Train { condition_index: 2 }).unwrap();
        let rows = model.style_rows(&sample.labels, 2).unwrap();
        let l_sc = style_contrastive_loss(&out.styled, &model.sso.bank, &model.sso.projector, 2, cfg.sso.tau).unwrap();
        let spec = model.sso.project_specific_rows(&rows.spec).unwrap();
        let l_sa = style_aggregation_loss(&out.styled, &spec, &cfg.sa_layer_weights).unwrap();
        l_sc.mul_scalar(w_sa0).add(&l_sa.mul_scalar(w_sc0))
    };
    let e = probe_gradients(&picks, loss_frozen, 8, 1e-5, &mut rng);
    println!("style losses, frozen w:     {e:.3e}");
}
