# certificate / error-curve tables and the regularization comparison report
