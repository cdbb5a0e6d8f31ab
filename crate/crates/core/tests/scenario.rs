mod common;

use common::{small_site, tiny_config};
use fedrecon_core::metrics::ReportMeta;
use fedrecon_core::model::UNet;
use fedrecon_core::scenario::{run_scenario, train_single, validate_sites, Strategy, TrainedModel};
use fedrecon_core::sites::SiteDataset;
use fedrecon_core::Error;

#[test]
fn strategy_names_parse_back() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        assert_eq!(s.name().to_lowercase().parse::<Strategy>().unwrap(), s);
    }
    assert_eq!("FL-MRCM".parse::<Strategy>().unwrap(), Strategy::Flmrcm);
    assert!(matches!("Average".parse::<Strategy>(), Err(Error::Config(_))));
}

#[test]
fn site_lists_are_checked_per_strategy() {
    let sites: Vec<SiteDataset> = (0..3).map(|i| small_site(i, 2, 1, 16)).collect();
    let (a, b, c) = (&sites[0], &sites[1], &sites[2]);
    assert!(validate_sites(Strategy::Single, &[a], a).is_ok());
    assert!(validate_sites(Strategy::Single, &[b], a).is_err());
    assert!(validate_sites(Strategy::Cross, &[b], a).is_ok());
    assert!(validate_sites(Strategy::Cross, &[a], a).is_err());
    assert!(validate_sites(Strategy::Cross, &[b, c], a).is_err());
    for s in [Strategy::Fused, Strategy::Mix, Strategy::Flmr, Strategy::Flmrcm] {
        assert!(validate_sites(s, &[b, c], a).is_ok());
        assert!(validate_sites(s, &[], a).is_err());
        assert!(validate_sites(s, &[b, b], a).is_err());
    }
}

#[test]
fn fused_copies_of_one_model_match_that_model() {
    let cfg = tiny_config(2, 1);
    let site = small_site(1, 6, 4, 16);
    let net = UNet::new(cfg.unet).unwrap();
    let params = match train_single(&cfg, &site).unwrap().model {
        TrainedModel::Single(p) => p,
        TrainedModel::Ensemble(_) => unreachable!(),
    };
    let own = TrainedModel::Single(params.clone()).evaluate(&net, &site.test, ReportMeta::default()).unwrap();
    for n in 1..=4 {
        let fused = TrainedModel::Ensemble(vec![params.clone(); n]);
        let r = fused.evaluate(&net, &site.test, ReportMeta::default()).unwrap();
        assert_eq!(r, own, "{n} copies");
    }
}

#[test]
fn fused_output_is_the_mean_of_member_outputs() {
    let cfg = tiny_config(1, 1);
    let net = UNet::new(cfg.unet).unwrap();
    let members: Vec<_> = (0..3).map(|s| net.init(&mut fedrecon_core::seed::rng(s, &[]))).collect();
    let site = small_site(0, 1, 2, 16);
    let (x, _) = fedrecon_core::sites::stack_batch(&[&site.test[0], &site.test[1]]).unwrap();
    let fused = TrainedModel::Ensemble(members.clone()).predict(&net, &x).unwrap();
    let outs: Vec<_> = members.iter().map(|p| net.reconstruct(p, &x).unwrap()).collect();
    for (i, v) in fused.data().iter().enumerate() {
        let naive = outs.iter().map(|o| o.data()[i]).sum::<f64>() / 3.0;
        assert!((v - naive).abs() < 1e-12);
    }
}

#[test]
fn mix_of_one_site_is_single() {
    let cfg = tiny_config(2, 2);
    let site = small_site(2, 6, 3, 16);
    let single = run_scenario(Strategy::Single, &cfg, &[&site], &site).unwrap();
    let mix = run_scenario(Strategy::Mix, &cfg, &[&site], &site).unwrap();
    assert_eq!(single.per_sample, mix.per_sample);
    assert_eq!((single.mean_ssim, single.mean_psnr), (mix.mean_ssim, mix.mean_psnr));
    assert_eq!(mix.meta.strategy, "Mix");
    assert_eq!(mix.meta.train_sites, vec![site.site_id().to_string()]);
}

#[test]
fn every_strategy_runs_end_to_end() {
    let cfg = tiny_config(1, 1);
    let sites: Vec<SiteDataset> = (0..3).map(|i| small_site(i, 4, 2, 16)).collect();
    let (a, b, c) = (&sites[0], &sites[1], &sites[2]);
    for s in Strategy::ALL {
        let train: Vec<&SiteDataset> = match s {
            Strategy::Single => vec![a],
            Strategy::Cross => vec![b],
            _ => vec![b, c],
        };
        let r = run_scenario(s, &cfg, &train, a).unwrap();
        assert_eq!(r.per_sample.len(), 2);
        assert_eq!(r.meta.test_site, a.site_id());
        assert!(r.mean_psnr.is_finite() && r.mean_ssim.is_finite(), "{s}");
    }
}
