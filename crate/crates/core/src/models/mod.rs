pub mod bernoulli;
pub mod bicluster;
pub mod gmm;
pub mod toy;
