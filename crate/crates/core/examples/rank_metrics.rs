//! Accuracy and rank AUC, including ties and the one-class case.

use sharp_mil::train::metrics;

fn main() {
    let labels = [0, 0, 1, 1];
    let scores = [0.1, 0.4, 0.35, 0.8];
    println!("auc {:?}", metrics::auc(&scores, &labels));
    println!("accuracy {:?}", metrics::accuracy(&scores, &labels));
    println!(
        "ranks with ties {:?}",
        metrics::average_ranks(&[0.2, 0.5, 0.5, 0.9])
    );
    println!("single class {:?}", metrics::auc(&[0.3, 0.6], &[1, 1]));
}
