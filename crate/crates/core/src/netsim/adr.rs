//! Static data-rate assignment standing in for the ADR loop.

use crate::phy::{LinkModel, MAX_SF};

/// Spreading factor for a node whose strongest own-network gateway link
/// arrives at `best_rx_power` dBm: the lowest SF that keeps `margin_db`
/// above sensitivity. `None` when even SF12 cannot close the link.
pub fn assign_spreading_factor(
    best_rx_power: f64,
    model: &LinkModel,
    margin_db: f64,
) -> Option<u8> {
    model.lowest_sf_for(best_rx_power, margin_db)
}

/// As [`assign_spreading_factor`], falling back to SF12 for unreachable
/// nodes. The flag is true when the fallback was used.
pub fn assign_or_max(best_rx_power: f64, model: &LinkModel, margin_db: f64) -> (u8, bool) {
    match assign_spreading_factor(best_rx_power, model, margin_db) {
        Some(sf) => (sf, false),
        None => (MAX_SF, true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phy::received_power;

    #[test]
    fn close_node_gets_sf7() {
        let model = LinkModel::default();
        // 14 dBm - 40 dB - 27 * log10(50) dB = -71.872 dBm, far above -120.
        let p = received_power(14.0, 50.0, &model).unwrap();
        assert!((p - -71.872).abs() < 1e-3);
        assert_eq!(assign_spreading_factor(p, &model, 3.0), Some(7));
    }

    #[test]
    fn band_edges() {
        let model = LinkModel::default();
        assert_eq!(assign_spreading_factor(-120.0, &model, 3.0), Some(7));
        assert_eq!(assign_spreading_factor(-120.01, &model, 3.0), Some(8));
        assert_eq!(assign_spreading_factor(-131.6, &model, 3.0), Some(12));
        assert_eq!(assign_spreading_factor(-134.0, &model, 3.0), Some(12));
        assert_eq!(assign_spreading_factor(-134.01, &model, 3.0), None);
        assert_eq!(assign_or_max(-150.0, &model, 3.0), (12, true));
    }

    #[test]
    fn range_limit_maps_to_sf12() {
        let model = LinkModel::default();
        // Distance at which the margin-adjusted power equals SF12 sensitivity.
        let d = 10f64.powf((14.0 - 40.0 + 137.0 - 3.0) / 27.0);
        let p = received_power(14.0, d * 0.999, &model).unwrap();
        assert_eq!(assign_spreading_factor(p, &model, 3.0), Some(12));
        let p = received_power(14.0, d * 1.01, &model).unwrap();
        assert_eq!(assign_spreading_factor(p, &model, 3.0), None);
    }
}
