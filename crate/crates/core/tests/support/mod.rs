pub mod grad_checks;
